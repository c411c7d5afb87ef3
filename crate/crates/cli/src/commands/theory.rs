use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dspa_core::theory::{
    check_coactivation_bound, check_concentration, check_demixing, check_factorization, topk_sweep,
    DEFAULT_FACTORIZATION_BOUND,
};
use dspa_core::{DspaError, SyntheticWorld};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{emit, Context};
use crate::config::{required, Layered};
use crate::{layered, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Factorization,
    Coactivation,
    Concentration,
    Topk,
    Demix,
    All,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryArgs {
    /// World specification JSON.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub check: Option<Check>,
    /// Samples for factorization, co-activation and de-mixing.
    #[arg(long)]
    pub n: Option<usize>,
    /// Gated samples per concentration trial.
    #[arg(long)]
    pub n_i: Option<usize>,
    /// Concentration trials.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gate (map row) examined by co-activation and concentration.
    #[arg(long)]
    pub gate: Option<usize>,
    /// Concentration failure probability.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Relative Frobenius bound for factorization.
    #[arg(long)]
    pub bound: Option<f64>,
    /// Required concentration coverage (default: 1 - delta - 3 sigma).
    #[arg(long)]
    pub min_coverage: Option<f64>,
    /// Random utility vectors for the top-k sweep.
    #[arg(long)]
    pub topk_cases: Option<usize>,
    #[arg(long)]
    pub max_dim: Option<usize>,
    #[arg(long)]
    pub max_k: Option<usize>,
    /// Comma-separated active subset for de-mixing.
    #[arg(long, value_delimiter = ',')]
    pub subset: Option<Vec<usize>>,
}

layered!(TheoryArgs {
    world,
    check,
    n,
    n_i,
    trials,
    seed,
    gate,
    delta,
    bound,
    min_coverage,
    topk_cases,
    max_dim,
    max_k,
    subset,
});

fn load_world(args: &TheoryArgs) -> Result<SyntheticWorld, DspaError> {
    SyntheticWorld::load(&required(&args.world, "world")?)
}

pub fn theory(args: TheoryArgs, ctx: &Context) -> anyhow::Result<Outcome> {
    let mut args = args.layer(ctx.file.section("theory")?);
    let check = *args.check.get_or_insert(Check::All);
    let n = *args.n.get_or_insert(20_000);
    let n_i = *args.n_i.get_or_insert(250);
    let trials = *args.trials.get_or_insert(500);
    let seed = *args.seed.get_or_insert(0);
    let gate = *args.gate.get_or_insert(0);
    let delta = *args.delta.get_or_insert(0.05);
    let bound = *args.bound.get_or_insert(DEFAULT_FACTORIZATION_BOUND);
    let topk_cases = *args.topk_cases.get_or_insert(1000);
    let max_dim = *args.max_dim.get_or_insert(12);
    let max_k = *args.max_k.get_or_insert(4);
    let wants = |c: Check| check == c || check == Check::All;

    let needs_world = check != Check::Topk;
    let world = if needs_world { Some(load_world(&args)?) } else { None };
    let mut results = Map::new();
    let mut passed = true;

    if let Some(w) = &world {
        results.insert("sigma_projected".into(), Value::Bool(w.sigma_projected));
        if wants(Check::Factorization) {
            let r = check_factorization(w, n, seed, bound)?;
            passed &= r.passed;
            results.insert("factorization".into(), serde_json::to_value(r)?);
        }
        if wants(Check::Coactivation) {
            let r = check_coactivation_bound(w, gate, n, seed)?;
            passed &= r.passed;
            results.insert("coactivation".into(), serde_json::to_value(r)?);
        }
        if wants(Check::Concentration) {
            let r = check_concentration(w, gate, n_i, trials, delta, seed, args.min_coverage)?;
            passed &= r.passed;
            results.insert("concentration".into(), serde_json::to_value(r)?);
        }
        let subset = match (&args.subset, check) {
            (Some(s), _) => Some(s.clone()),
            (None, Check::Demix) => return Err(DspaError::invalid("missing required --subset").into()),
            (None, _) => None,
        };
        if let (Some(subset), true) = (subset, wants(Check::Demix)) {
            let r = check_demixing(w, &subset, n, seed)?;
            results.insert("demix".into(), serde_json::to_value(r)?);
        }
    }
    if wants(Check::Topk) {
        let r = topk_sweep(topk_cases, max_dim, max_k, seed)?;
        passed &= r.passed;
        results.insert("topk".into(), serde_json::to_value(r)?);
    }
    results.insert("passed".into(), Value::Bool(passed));
    emit("theory", ctx, &args, &results)?;
    Ok(if passed { Outcome::Ok } else { Outcome::ChecksFailed })
}
