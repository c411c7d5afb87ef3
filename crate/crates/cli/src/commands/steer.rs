use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use dspa_core::steering::{write_reports_jsonl, DEFAULT_ALPHA, DEFAULT_K_DIFF, DEFAULT_K_PROMPT};
use dspa_core::{density, make_plan, read_trace, steer_stream, write_trace, DiffMap, SaeParams, Segment, SteeringMode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{emit, Context};
use crate::config::{required, Layered};
use crate::{layered, Outcome};

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerArgs {
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// SAE at the prompt layer, used for prompt densities.
    #[arg(long)]
    pub input_sae: Option<PathBuf>,
    /// SAE at the output layer, used for edits.
    #[arg(long)]
    pub output_sae: Option<PathBuf>,
    /// Prompt-only trace at the input layer.
    #[arg(long)]
    pub prompt_trace: Option<PathBuf>,
    /// Trace of output-layer hidden states to edit.
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub k_prompt: Option<usize>,
    #[arg(long)]
    pub k_diff: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    /// ablate, augment or both.
    #[arg(long)]
    pub mode: Option<String>,
    /// Leave the stream's prompt tokens untouched.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub response_only: Option<bool>,
    /// Edited stream, same format as --stream.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines edit report, one line per token.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Writes the plan as one JSON line.
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
}

layered!(SteerArgs {
    map,
    input_sae,
    output_sae,
    prompt_trace,
    stream,
    k_prompt,
    k_diff,
    alpha,
    mode,
    response_only,
    out,
    report,
    plan_out,
});

pub fn steer(args: SteerArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("steer")?);
    let map = DiffMap::read(&required(&args.map, "map")?)?;
    let input_sae = SaeParams::load(&required(&args.input_sae, "input-sae")?)?;
    let output_sae = SaeParams::load(&required(&args.output_sae, "output-sae")?)?;
    let prompt = read_trace(&required(&args.prompt_trace, "prompt-trace")?)?;
    let stream = read_trace(&required(&args.stream, "stream")?)?;
    let out = required(&args.out, "out")?;
    let k_prompt = *args.k_prompt.get_or_insert(DEFAULT_K_PROMPT);
    let k_diff = *args.k_diff.get_or_insert(DEFAULT_K_DIFF);
    let alpha = *args.alpha.get_or_insert(DEFAULT_ALPHA);
    let mode: SteeringMode = args.mode.get_or_insert_with(|| "ablate".into()).parse()?;
    let response_only = *args.response_only.get_or_insert(false);

    let rho = density(&input_sae, &prompt, Segment::Prompt)?;
    let plan = make_plan(&map, &rho, k_prompt, k_diff, alpha, mode)?;

    let range = if response_only {
        stream.segment_range(Segment::Response)
    } else {
        0..stream.token_count()
    };
    let rows: Vec<&[f32]> = range.clone().map(|t| stream.row(t)).collect();
    let (edited, mut reports) = steer_stream(&plan, &output_sae, &rows)?;
    for r in &mut reports {
        r.token += range.start;
    }
    let mut hidden = stream.hidden().to_vec();
    let d = stream.d_model();
    for (k, h) in edited.iter().enumerate() {
        let t = range.start + k;
        hidden[t * d..(t + 1) * d].copy_from_slice(h);
    }
    write_trace(&stream.with_hidden(hidden)?, &out)?;

    if let Some(path) = &args.report {
        let mut w = BufWriter::new(File::create(path)?);
        write_reports_jsonl(&reports, &mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.plan_out {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &plan)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }

    let edited_tokens = reports.iter().filter(|r| r.residual_norm > 0.0).count();
    let dead_tokens = reports.iter().filter(|r| r.dead).count();
    let result = json!({
        "prompt_features": plan.prompt_features,
        "augment": plan.augment,
        "ablate": plan.ablate,
        "tokens": reports.len(),
        "edited_tokens": edited_tokens,
        "dead_tokens": dead_tokens,
        "out": out,
    });
    emit("steer", ctx, &args, &result)?;
    Ok(Outcome::Ok)
}
