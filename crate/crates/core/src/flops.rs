//! Closed-form alignment-stage compute for this pipeline and for a
//! two-step trained-adapter baseline.
//!
//! One forward token costs `2P` FLOPs and one forward+backward token `6P`.
//! The map needs three forward passes over the prompt and one each over
//! chosen and rejected. The baseline's first step sees `4N` examples with two
//! gradient-tracked passes each at length `L1` (`48P N L1`); the second runs
//! `steps_factor * N` steps over a `B x L2` batch at `12P` per token.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DspaError, Result};

pub const DEFAULT_STEPS_FACTOR: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(alias = "P")]
    pub params: f64,
    #[serde(alias = "p")]
    pub prompt_len: f64,
    #[serde(alias = "c")]
    pub chosen_len: f64,
    #[serde(alias = "r")]
    pub rejected_len: f64,
    #[serde(alias = "L1")]
    pub step1_len: f64,
    #[serde(alias = "L2")]
    pub step2_len: f64,
    #[serde(alias = "B")]
    pub step2_batch: f64,
    #[serde(default = "default_steps_factor")]
    pub steps_factor: f64,
    #[serde(alias = "N", default = "one")]
    pub n_triples: f64,
    /// Measured numbers, echoed verbatim and never modelled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<serde_json::Value>,
    /// Parameter name to grid of values to substitute one at a time.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<f64>>,
}

fn default_steps_factor() -> f64 {
    DEFAULT_STEPS_FACTOR
}

fn one() -> f64 {
    1.0
}

impl CostConfig {
    /// 8B parameters, 1000-token segments, `L1 = 768`, `B = 64`, `L2 = 512`.
    pub fn reference() -> Self {
        Self {
            params: 8e9,
            prompt_len: 1000.0,
            chosen_len: 1000.0,
            rejected_len: 1000.0,
            step1_len: 768.0,
            step2_len: 512.0,
            step2_batch: 64.0,
            steps_factor: DEFAULT_STEPS_FACTOR,
            n_triples: 1.0,
            wall_clock: None,
            sweep: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("params", self.params),
            ("prompt_len", self.prompt_len),
            ("chosen_len", self.chosen_len),
            ("rejected_len", self.rejected_len),
            ("step1_len", self.step1_len),
            ("step2_len", self.step2_len),
            ("step2_batch", self.step2_batch),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DspaError::invalid(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.n_triples >= 0.0 && self.n_triples.is_finite()) {
            return Err(DspaError::invalid(format!("n_triples = {} must be >= 0", self.n_triples)));
        }
        if !(self.steps_factor > 0.0 && self.steps_factor <= 1.0) {
            return Err(DspaError::invalid(format!(
                "steps_factor = {} must be in (0, 1]",
                self.steps_factor
            )));
        }
        Ok(())
    }

    fn with(&self, name: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let slot = match name {
            "params" | "P" => &mut c.params,
            "prompt_len" | "p" => &mut c.prompt_len,
            "chosen_len" | "c" => &mut c.chosen_len,
            "rejected_len" | "r" => &mut c.rejected_len,
            "step1_len" | "L1" => &mut c.step1_len,
            "step2_len" | "L2" => &mut c.step2_len,
            "step2_batch" | "B" => &mut c.step2_batch,
            "steps_factor" => &mut c.steps_factor,
            "n_triples" | "N" => &mut c.n_triples,
            other => return Err(DspaError::invalid(format!("unknown sweep parameter {other:?}"))),
        };
        *slot = value;
        c.validate()?;
        Ok(c)
    }
}

/// `2 P N (3p + c + r)`.
pub fn flops_dspa(cfg: &CostConfig) -> f64 {
    2.0 * cfg.params * cfg.n_triples * (3.0 * cfg.prompt_len + cfg.chosen_len + cfg.rejected_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RahfFlops {
    pub step1: f64,
    pub step2: f64,
    pub total: f64,
}

/// `48 P N L1` and `12 P (B L2)(steps_factor N)`.
pub fn flops_rahf(cfg: &CostConfig) -> RahfFlops {
    let step1 = 48.0 * cfg.params * cfg.n_triples * cfg.step1_len;
    let step2 = 12.0 * cfg.params * (cfg.step2_batch * cfg.step2_len) * (cfg.steps_factor * cfg.n_triples);
    RahfFlops {
        step1,
        step2,
        total: step1 + step2,
    }
}

/// Baseline-to-pipeline ratio; independent of `N`.
pub fn cost_ratio(cfg: &CostConfig) -> f64 {
    let unit = CostConfig {
        n_triples: 1.0,
        ..cfg.clone()
    };
    flops_rahf(&unit).total / flops_dspa(&unit)
}

/// Rounds to `digits` significant figures.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits as i32 - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub dspa: f64,
    pub rahf_step1: f64,
    pub rahf_step2: f64,
    pub rahf_total: f64,
}

impl CostTotals {
    fn of(cfg: &CostConfig) -> Self {
        let r = flops_rahf(cfg);
        Self {
            dspa: flops_dspa(cfg),
            rahf_step1: r.step1,
            rahf_step2: r.step2,
            rahf_total: r.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: f64,
    pub totals: CostTotals,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub totals: CostTotals,
    /// Coefficients of `N`.
    pub per_triple: CostTotals,
    pub ratio: f64,
    pub sweep: Vec<SweepPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<serde_json::Value>,
}

pub fn cost_report(cfg: &CostConfig) -> Result<CostReport> {
    cfg.validate()?;
    let unit = CostConfig {
        n_triples: 1.0,
        ..cfg.clone()
    };
    let mut sweep = Vec::new();
    for (name, values) in &cfg.sweep {
        for &v in values {
            let c = cfg.with(name, v)?;
            sweep.push(SweepPoint {
                parameter: name.clone(),
                value: v,
                totals: CostTotals::of(&c),
                ratio: cost_ratio(&c),
            });
        }
    }
    Ok(CostReport {
        config: cfg.clone(),
        totals: CostTotals::of(cfg),
        per_triple: CostTotals::of(&unit),
        ratio: cost_ratio(cfg),
        sweep,
        wall_clock: cfg.wall_clock.clone(),
    })
}
