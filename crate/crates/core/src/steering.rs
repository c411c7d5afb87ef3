//! Prompt-conditional, token-conditional latent steering.
//!
//! A [`SteeringPlan`] is fixed once per prompt: the densest prompt features
//! select rows of the map, their sum scores every output feature, and the
//! top/bottom `k_diff` scores become the augment/ablate sets. At each token
//! only latents that are already active are moved, by `alpha * M_t` where
//! `M_t` is the largest latent at that token, and ablations clamp at zero.
//! The edit is applied to the hidden state as `h + W_dec (f' - f)`.

use std::collections::BTreeSet;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{top_k_prompt_features, DensityVector};
use crate::diff_map::DiffMap;
use crate::error::{ensure_dims, DspaError, Result};
use crate::gram::GramMatrix;
use crate::sae::SaeParams;
use crate::select::{bottom_k, top_k};

pub const DEFAULT_K_PROMPT: usize = 32;
pub const DEFAULT_K_DIFF: usize = 16;
pub const DEFAULT_ALPHA: f32 = 0.2;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    #[default]
    AblateOnly,
    AugmentOnly,
    Both,
}

impl SteeringMode {
    pub fn augments(self) -> bool {
        matches!(self, SteeringMode::AugmentOnly | SteeringMode::Both)
    }

    pub fn ablates(self) -> bool {
        matches!(self, SteeringMode::AblateOnly | SteeringMode::Both)
    }
}

impl FromStr for SteeringMode {
    type Err = DspaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablate" | "ablate_only" => Ok(SteeringMode::AblateOnly),
            "augment" | "augment_only" => Ok(SteeringMode::AugmentOnly),
            "both" => Ok(SteeringMode::Both),
            other => Err(DspaError::invalid(format!(
                "unknown steering mode {other:?} (expected ablate, augment or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPlan {
    /// Selected prompt features, densest first.
    pub prompt_features: Vec<usize>,
    /// `s = A^T g_hat`, one score per output feature.
    pub scores: Vec<f64>,
    /// Highest scores first.
    pub augment: Vec<usize>,
    /// Lowest scores first.
    pub ablate: Vec<usize>,
    pub alpha: f32,
    pub mode: SteeringMode,
}

impl SteeringPlan {
    /// Output features this plan may move, with `true` for augmentation.
    fn targets(&self) -> Vec<(usize, bool)> {
        let mut t: Vec<(usize, bool)> = Vec::new();
        if self.mode.augments() {
            t.extend(self.augment.iter().map(|&j| (j, true)));
        }
        if self.mode.ablates() {
            t.extend(self.ablate.iter().map(|&j| (j, false)));
        }
        t.sort_unstable();
        t
    }

    /// Selected augment/ablate sets from scores, failing on overlap.
    pub fn from_scores(
        prompt_features: Vec<usize>,
        scores: Vec<f64>,
        k_diff: usize,
        alpha: f32,
        mode: SteeringMode,
    ) -> Result<Self> {
        let d = scores.len();
        if k_diff == 0 || k_diff > d {
            return Err(DspaError::invalid(format!("k_diff = {k_diff} must be in 1..={d}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(DspaError::invalid(format!("alpha = {alpha} must be finite and >= 0")));
        }
        let augment = top_k(&scores, k_diff);
        let ablate = bottom_k(&scores, k_diff);
        let up: BTreeSet<usize> = augment.iter().copied().collect();
        let overlap: Vec<usize> = ablate.iter().copied().filter(|j| up.contains(j)).collect();
        if !overlap.is_empty() {
            let mut overlap = overlap;
            overlap.sort_unstable();
            return Err(DspaError::DegenerateScores { overlap });
        }
        Ok(Self {
            prompt_features,
            scores,
            augment,
            ablate,
            alpha,
            mode,
        })
    }
}

/// Scores output features from the prompt's densest input features and picks
/// the augment/ablate sets.
pub fn make_plan(
    map: &DiffMap,
    prompt_density: &DensityVector,
    k_prompt: usize,
    k_diff: usize,
    alpha: f32,
    mode: SteeringMode,
) -> Result<SteeringPlan> {
    ensure_dims("prompt density vs map", map.d_sae(), prompt_density.len())?;
    let selection = top_k_prompt_features(prompt_density, k_prompt)?;
    let mut rows: Vec<(usize, f64)> = selection.indices.iter().map(|&i| (i, 1.0)).collect();
    rows.sort_unstable_by_key(|r| r.0);
    let scores = map.combine_rows(&rows)?;
    SteeringPlan::from_scores(selection.indices, scores, k_diff, alpha, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEdit {
    pub feature: usize,
    pub before: f32,
    pub after: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEditReport {
    pub token: usize,
    pub m_t: f32,
    pub edits: Vec<FeatureEdit>,
    /// `||W_dec (f' - f)||_2`.
    pub residual_norm: f64,
    /// All latents were zero; nothing could be edited.
    pub dead: bool,
}

/// Edits one output-layer hidden state. Returns the input unchanged (same
/// bits) when no selected latent is active or every step is zero.
pub fn edit_token(
    plan: &SteeringPlan,
    sae: &SaeParams,
    h_out: &[f32],
    token: usize,
) -> Result<(Vec<f32>, TokenEditReport)> {
    ensure_dims("plan scores vs SAE width", sae.d_sae(), plan.scores.len())?;
    let f = sae.encode(h_out)?;
    let m_t = f.max();
    let mut report = TokenEditReport {
        token,
        m_t,
        edits: Vec::new(),
        residual_norm: 0.0,
        dead: m_t == 0.0,
    };
    if report.dead {
        return Ok((h_out.to_vec(), report));
    }

    let step = plan.alpha * m_t;
    let latents = f.values();
    let mut delta = vec![0.0f32; latents.len()];
    let mut any_change = false;
    for (j, augment) in plan.targets() {
        let before = latents[j];
        if before <= 0.0 {
            continue;
        }
        let after = if augment { before + step } else { (before - step).max(0.0) };
        delta[j] = after - before;
        any_change |= delta[j] != 0.0;
        report.edits.push(FeatureEdit { feature: j, before, after });
    }
    if !any_change {
        return Ok((h_out.to_vec(), report));
    }

    let residual = sae.decode_delta(&delta)?;
    report.residual_norm = residual.iter().map(|&r| r as f64 * r as f64).sum::<f64>().sqrt();
    let edited = h_out.iter().zip(&residual).map(|(&h, &r)| h + r).collect();
    Ok((edited, report))
}

/// Applies [`edit_token`] independently at every position; token indices in
/// the reports are positions in `stream`.
pub fn steer_stream<R>(
    plan: &SteeringPlan,
    sae: &SaeParams,
    stream: &[R],
) -> Result<(Vec<Vec<f32>>, Vec<TokenEditReport>)>
where
    R: AsRef<[f32]> + Sync,
{
    let results: Vec<Result<(Vec<f32>, TokenEditReport)>> = stream
        .par_iter()
        .enumerate()
        .map(|(t, h)| edit_token(plan, sae, h.as_ref(), t))
        .collect();
    let mut edited = Vec::with_capacity(stream.len());
    let mut reports = Vec::with_capacity(stream.len());
    for r in results {
        let (h, rep) = r?;
        edited.push(h);
        reports.push(rep);
    }
    Ok((edited, reports))
}

pub fn write_reports_jsonl<W: Write>(reports: &[TokenEditReport], mut out: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// De-mixed score `A_{S,:}^T (M_S + lambda I)^{-1} g_S`.
///
/// `gram` may cover more features than `prompt_features`; it is restricted
/// first. Refuses when the regularised restriction has condition number above
/// [`MAX_CONDITION`].
pub fn demix_scores(
    map: &DiffMap,
    gram: &GramMatrix,
    prompt_features: &[usize],
    gates: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    ensure_dims("prompt gate vector", prompt_features.len(), gates.len())?;
    if prompt_features.is_empty() {
        return Err(DspaError::Empty("prompt feature set"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DspaError::invalid(format!("ridge {lambda} must be finite and >= 0")));
    }
    let m_s = if gram.indices == prompt_features {
        gram.clone()
    } else {
        gram.restrict(prompt_features)?
    };
    let s = prompt_features.len();
    let mut m = DMatrix::from_row_slice(s, s, &m_s.values);
    for a in 0..s {
        m[(a, a)] += lambda;
    }
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(DspaError::IllConditioned {
            condition,
            limit: MAX_CONDITION,
        });
    }
    let w = m
        .lu()
        .solve(&DVector::from_column_slice(gates))
        .ok_or(DspaError::IllConditioned {
            condition,
            limit: MAX_CONDITION,
        })?;
    let weights: Vec<(usize, f64)> = prompt_features.iter().copied().zip(w.iter().copied()).collect();
    map.combine_rows(&weights)
}
