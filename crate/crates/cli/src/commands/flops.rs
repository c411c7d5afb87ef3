use std::collections::BTreeMap;

use clap::{Args, ValueEnum};
use dspa_core::flops::DEFAULT_STEPS_FACTOR;
use dspa_core::{cost_report, CostConfig, CostReport, DspaError};
use serde::{Deserialize, Serialize};

use super::{emit, Context};
use crate::config::Layered;
use crate::{layered, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Text,
}

/// Every field defaults to the 8B reference configuration.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsArgs {
    /// Parameter count.
    #[arg(long)]
    #[serde(alias = "P")]
    pub params: Option<f64>,
    #[arg(long)]
    #[serde(alias = "p")]
    pub prompt_len: Option<f64>,
    #[arg(long)]
    #[serde(alias = "c")]
    pub chosen_len: Option<f64>,
    #[arg(long)]
    #[serde(alias = "r")]
    pub rejected_len: Option<f64>,
    /// Baseline step-1 effective sequence length.
    #[arg(long)]
    #[serde(alias = "L1")]
    pub step1_len: Option<f64>,
    /// Baseline step-2 sequence length.
    #[arg(long)]
    #[serde(alias = "L2")]
    pub step2_len: Option<f64>,
    /// Baseline step-2 effective batch.
    #[arg(long)]
    #[serde(alias = "B")]
    pub step2_batch: Option<f64>,
    /// Baseline step-2 optimizer steps per triple.
    #[arg(long)]
    pub steps_factor: Option<f64>,
    #[arg(long)]
    #[serde(alias = "N")]
    pub n_triples: Option<f64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Sensitivity grid, e.g. `--sweep L1=384,768` (repeatable).
    #[arg(long = "sweep", value_name = "NAME=V1,V2")]
    #[serde(skip)]
    pub sweep_flags: Vec<String>,
    #[arg(skip)]
    pub sweep: Option<BTreeMap<String, Vec<f64>>>,
    #[arg(skip)]
    pub wall_clock: Option<serde_json::Value>,
}

layered!(FlopsArgs {
    params,
    prompt_len,
    chosen_len,
    rejected_len,
    step1_len,
    step2_len,
    step2_batch,
    steps_factor,
    n_triples,
    format,
    sweep,
    wall_clock,
});

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>), DspaError> {
    let bad = || DspaError::invalid(format!("sweep {spec:?} must look like NAME=V1,V2"));
    let (name, values) = spec.split_once('=').ok_or_else(bad)?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), values))
}

fn render_text(report: &CostReport) -> String {
    let n = report.config.n_triples;
    let rows = [
        ("DSPA", report.per_triple.dspa, report.totals.dspa),
        ("RAHF step 1", report.per_triple.rahf_step1, report.totals.rahf_step1),
        ("RAHF step 2", report.per_triple.rahf_step2, report.totals.rahf_step2),
        ("RAHF total", report.per_triple.rahf_total, report.totals.rahf_total),
    ];
    let mut s = format!("{:<14}{:>14}{:>14}\n", "model", "per triple", format!("N = {n}"));
    for (name, per, total) in rows {
        s += &format!("{name:<14}{per:>14.3e}{total:>14.3e}\n");
    }
    s += &format!("{:<14}{:>14.4}\n", "ratio", report.ratio);
    if !report.sweep.is_empty() {
        s += &format!("\n{:<14}{:>14}{:>14}{:>14}\n", "sweep", "value", "RAHF total", "ratio");
        for p in &report.sweep {
            s += &format!("{:<14}{:>14}{:>14.3e}{:>14.4}\n", p.parameter, p.value, p.totals.rahf_total, p.ratio);
        }
    }
    if let Some(w) = &report.wall_clock {
        s += &format!("\nwall clock (reported, not modelled): {w}\n");
    }
    s
}

pub fn flops(args: FlopsArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut flag_sweep = BTreeMap::new();
    for spec in &args.sweep_flags {
        let (name, values) = parse_sweep(spec)?;
        flag_sweep.insert(name, values);
    }
    let file: FlopsArgs = ctx.file.flops_section()?;
    let mut sweep = file.sweep.clone().unwrap_or_default();
    sweep.extend(flag_sweep);
    let mut args = args.layer(file);
    args.sweep = (!sweep.is_empty()).then_some(sweep);

    let reference = CostConfig::reference();
    let cfg = CostConfig {
        params: *args.params.get_or_insert(reference.params),
        prompt_len: *args.prompt_len.get_or_insert(reference.prompt_len),
        chosen_len: *args.chosen_len.get_or_insert(reference.chosen_len),
        rejected_len: *args.rejected_len.get_or_insert(reference.rejected_len),
        step1_len: *args.step1_len.get_or_insert(reference.step1_len),
        step2_len: *args.step2_len.get_or_insert(reference.step2_len),
        step2_batch: *args.step2_batch.get_or_insert(reference.step2_batch),
        steps_factor: *args.steps_factor.get_or_insert(DEFAULT_STEPS_FACTOR),
        n_triples: *args.n_triples.get_or_insert(1.0),
        wall_clock: args.wall_clock.clone(),
        sweep: args.sweep.clone().unwrap_or_default(),
    };
    let format = *args.format.get_or_insert(Format::Json);
    let report = cost_report(&cfg)?;
    match format {
        Format::Json => emit("flops", ctx, &cfg, &report)?,
        Format::Text => {
            println!("# config: {}", serde_json::to_string(&cfg)?);
            print!("{}", render_text(&report));
        }
    }
    Ok(Outcome::Ok)
}
