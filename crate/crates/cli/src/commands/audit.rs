use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use dspa_core::audit::DEFAULT_SET_SIZE;
use dspa_core::{
    coverage_check, export_evidence, rank_columns, read_trace, set_overlap, DiffMap, DspaError, SaeParams, SteeringPlan,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{emit, Context};
use crate::config::{required, Layered};
use crate::{layered, Outcome};

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub set_size: Option<usize>,
    /// Second map whose sets are intersected with this one's.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// JSON-lines steering plans (as written by `steer --plan-out`).
    #[arg(long)]
    pub plans: Option<PathBuf>,
}

layered!(AuditArgs { map, set_size, compare, plans });

fn read_plans(path: &PathBuf) -> Result<Vec<SteeringPlan>, DspaError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DspaError::MissingFile(path.clone()),
        _ => e.into(),
    })?;
    let mut plans = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            plans.push(serde_json::from_str(&line)?);
        }
    }
    Ok(plans)
}

pub fn audit(args: AuditArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("audit")?);
    let map = DiffMap::read(&required(&args.map, "map")?)?;
    let set_size = *args.set_size.get_or_insert(DEFAULT_SET_SIZE);
    let sets = rank_columns(&map, set_size)?;

    let overlap = match &args.compare {
        Some(p) => {
            let other = rank_columns(&DiffMap::read(p)?, set_size)?;
            Some(set_overlap(&sets, &other)?)
        }
        None => None,
    };
    let coverage = match &args.plans {
        Some(p) => Some(coverage_check(&read_plans(p)?, &sets)?),
        None => None,
    };
    if let Some(w) = &sets.warning {
        eprintln!("warning: {w}");
    }
    let result = json!({
        "sets": sets,
        "overlap": overlap,
        "coverage": coverage,
    });
    emit("audit", ctx, &args, &result)?;
    Ok(Outcome::Ok)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// SAE at the output layer.
    #[arg(long)]
    pub output_sae: Option<PathBuf>,
    /// Output-layer trace files.
    #[arg(long, num_args = 1..)]
    pub traces: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub feature: Option<usize>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// JSON-lines evidence bundle; records go to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(EvidenceArgs { map, output_sae, traces, feature, top_n, out });

pub const DEFAULT_TOP_N: usize = 20;

pub fn evidence(args: EvidenceArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("evidence")?);
    let map = DiffMap::read(&required(&args.map, "map")?)?;
    let sae = SaeParams::load(&required(&args.output_sae, "output-sae")?)?;
    let paths = required(&args.traces, "traces")?;
    let feature = required(&args.feature, "feature")?;
    let top_n = *args.top_n.get_or_insert(DEFAULT_TOP_N);
    let traces = paths.iter().map(|p| read_trace(p)).collect::<Result<Vec<_>, _>>()?;

    let records = export_evidence(&map, &sae, &traces, feature, top_n)?;
    let records_json: Vec<_> = records
        .iter()
        .map(|r| {
            json!({
                "trace": r.trace,
                "path": paths[r.trace],
                "token": r.token,
                "segment": r.segment,
                "activation": r.activation,
            })
        })
        .collect();
    let result = match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            for r in &records_json {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            json!({ "feature": feature, "records": records.len(), "out": path })
        }
        None => json!({ "feature": feature, "records": records.len(), "evidence": records_json }),
    };
    emit("evidence", ctx, &args, &result)?;
    Ok(Outcome::Ok)
}
