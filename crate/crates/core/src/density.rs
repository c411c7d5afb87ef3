//! Activation densities, percentile gate thresholds and gate vectors.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, DspaError, Result};
use crate::sae::SaeParams;
use crate::trace::{ActivationTrace, Segment};

pub const DEFAULT_PERCENTILE: f64 = 75.0;

/// Fraction of tokens in one segment on which each feature is strictly active.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector {
    pub values: Vec<f64>,
    pub segment: Segment,
    /// Number of tokens the counts were taken over.
    pub length: usize,
}

impl DensityVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Nonzero entries as `(feature, density)` pairs in feature order.
    pub fn nonzero(&self) -> Vec<(u32, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub tau: Vec<f64>,
    pub percentile: f64,
    pub fit_count: usize,
}

impl GateThresholds {
    /// Placeholder for maps whose gates were supplied directly rather than
    /// fitted from densities.
    pub fn external(fit_count: usize) -> Self {
        Self {
            tau: Vec::new(),
            percentile: 0.0,
            fit_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateVector(pub Vec<bool>);

impl GateVector {
    pub fn from_indices(d: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; d];
        for &i in indices {
            bits[i] = true;
        }
        GateVector(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Per-token activity counts over a segment, normalised by its length.
pub fn density(sae: &SaeParams, trace: &ActivationTrace, segment: Segment) -> Result<DensityVector> {
    ensure_dims("trace d_model vs SAE d_model", sae.d_model(), trace.d_model())?;
    let range = trace.segment_range(segment);
    if range.is_empty() {
        return Err(DspaError::invalid(format!("{segment:?} segment is empty")));
    }
    let length = range.len();
    let mut counts = vec![0u32; sae.d_sae()];
    for t in range {
        let f = sae.encode(trace.row(t))?;
        for j in f.support() {
            counts[j] += 1;
        }
    }
    Ok(DensityVector {
        values: counts.into_iter().map(|c| c as f64 / length as f64).collect(),
        segment,
        length,
    })
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(DspaError::invalid(format!("percentile {p} outside (0, 100]")));
    }
    Ok(())
}

/// 1-based nearest rank `ceil(p * n / 100)`, clamped to `1..=n`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

/// Nearest-rank percentile of each feature's density over the dataset.
pub fn fit_thresholds(densities: &[DensityVector], p: f64) -> Result<GateThresholds> {
    check_percentile(p)?;
    let first = densities.first().ok_or(DspaError::Empty("density set"))?;
    let d = first.len();
    for dv in densities {
        ensure_dims("density vector", d, dv.len())?;
    }
    let rank = nearest_rank(p, densities.len());
    let tau = (0..d)
        .map(|i| {
            let mut col: Vec<f64> = densities.iter().map(|dv| dv.values[i]).collect();
            col.sort_by(f64::total_cmp);
            col[rank - 1]
        })
        .collect();
    Ok(GateThresholds {
        tau,
        percentile: p,
        fit_count: densities.len(),
    })
}

/// Same result as [`fit_thresholds`], from densities stored as sorted
/// `(feature, value)` lists of their nonzero entries. Zeros are counted
/// implicitly so memory stays proportional to the active features.
pub fn fit_thresholds_sparse(d: usize, densities: &[Vec<(u32, f64)>], p: f64) -> Result<GateThresholds> {
    check_percentile(p)?;
    if densities.is_empty() {
        return Err(DspaError::Empty("density set"));
    }
    let n = densities.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
    for dv in densities {
        for &(i, v) in dv {
            let i = i as usize;
            if i >= d {
                return Err(DspaError::dims("density feature index bound", d, i + 1));
            }
            columns[i].push(v);
        }
    }
    let rank = nearest_rank(p, n);
    let tau = columns
        .into_iter()
        .map(|mut col| {
            // Densities are non-negative, so the implicit zeros sort first.
            let zeros = n - col.len();
            if rank <= zeros {
                0.0
            } else {
                col.sort_by(f64::total_cmp);
                col[rank - zeros - 1]
            }
        })
        .collect();
    Ok(GateThresholds {
        tau,
        percentile: p,
        fit_count: n,
    })
}

pub fn gate(density: &DensityVector, thresholds: &GateThresholds) -> Result<GateVector> {
    ensure_dims("density vs thresholds", thresholds.tau.len(), density.len())?;
    Ok(GateVector(
        density
            .values
            .iter()
            .zip(&thresholds.tau)
            .map(|(&rho, &tau)| rho >= tau)
            .collect(),
    ))
}

/// Top-`k_prompt` prompt features by density.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSelection {
    /// Selected features in rank order (densest first).
    pub indices: Vec<usize>,
    pub indicator: GateVector,
}

impl PromptSelection {
    /// True when every selected feature has zero density.
    pub fn is_degenerate(&self, density: &DensityVector) -> bool {
        self.indices.iter().all(|&i| density.values[i] == 0.0)
    }
}

pub fn top_k_prompt_features(density: &DensityVector, k_prompt: usize) -> Result<PromptSelection> {
    if k_prompt == 0 || k_prompt > density.len() {
        return Err(DspaError::invalid(format!(
            "k_prompt = {k_prompt} must be in 1..={}",
            density.len()
        )));
    }
    let indices = crate::select::top_k(&density.values, k_prompt);
    let indicator = GateVector::from_indices(density.len(), &indices);
    Ok(PromptSelection { indices, indicator })
}
