//! Executable checks of the map's population structure on synthetic worlds.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::{trial_rng, SyntheticWorld};
use crate::density::{GateThresholds, GateVector};
use crate::diff_map::{DiffMap, PartialMap};
use crate::error::{DspaError, Result};
use crate::gram::estimate_gram_restricted;
use crate::select::bottom_k;
use crate::steering::{demix_scores, DEFAULT_RIDGE};

pub const DEFAULT_FACTORIZATION_BOUND: f64 = 0.05;
pub const NOISELESS_TOLERANCE: f64 = 1e-5;
pub const REFERENCE_SAMPLES: usize = 200_000;
const REFERENCE_CHUNKS: usize = 64;

/// Synthetic samples `(active gates, delta_rho)` and the accumulated map.
pub struct SyntheticMap {
    pub map: PartialMap,
    pub gates: Vec<GateVector>,
}

/// Draws `n` samples and accumulates them exactly as the map builder does.
pub fn synthetic_map(world: &SyntheticWorld, n: usize, seed: u64) -> Result<SyntheticMap> {
    if n == 0 {
        return Err(DspaError::invalid("sample count must be at least 1"));
    }
    let mut rng = trial_rng(seed, 0);
    let mut map = PartialMap::new(world.d, Arc::new(GateThresholds::external(n)));
    let mut gates = Vec::with_capacity(n);
    let mut sparse = Vec::with_capacity(world.d);
    for _ in 0..n {
        let active = world.sample_gates(&mut rng);
        let delta = world.sample_delta(&active, &mut rng);
        sparse.clear();
        sparse.extend(delta.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, &v)| (j as u32, v)));
        map.add(active.iter().copied(), &sparse);
        gates.push(GateVector::from_indices(world.d, &active));
    }
    Ok(SyntheticMap { map, gates })
}

fn relative_frobenius(estimate: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<f64> {
    let norm = target.norm();
    if norm == 0.0 {
        return Err(DspaError::invalid("target c*Sigma*B*M has zero norm"));
    }
    Ok((estimate - target).norm() / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub n: usize,
    pub seed: u64,
    /// Against the closed-form gate Gram matrix.
    pub error: f64,
    /// Against the Gram matrix of the gates actually drawn.
    pub empirical_gram_error: f64,
    pub bound: f64,
    pub noiseless: bool,
    pub passed: bool,
}

/// Relative Frobenius error of the estimated map (transposed) against
/// `c * Sigma * B * M`. Noiseless worlds must also match the empirical-Gram
/// target to [`NOISELESS_TOLERANCE`].
pub fn check_factorization(world: &SyntheticWorld, n: usize, seed: u64, bound: f64) -> Result<FactorizationReport> {
    let sm = synthetic_map(world, n, seed)?;
    let d = world.d;
    let a = sm.map.to_dense_f64()?;
    let estimate_t = DMatrix::from_fn(d, d, |j, i| a[i * d + j]);
    let error = relative_frobenius(&estimate_t, &world.factorization_target())?;
    let all: Vec<usize> = (0..d).collect();
    let m_hat = estimate_gram_restricted(&sm.gates, &all)?;
    let m_hat = DMatrix::from_row_slice(d, d, &m_hat.values);
    let empirical_target = world.shift() * m_hat;
    let empirical_gram_error = if empirical_target.norm() == 0.0 {
        estimate_t.norm()
    } else {
        relative_frobenius(&estimate_t, &empirical_target)?
    };
    let noiseless = world.noise_scale == 0.0 && !world.clip;
    let passed = error <= bound && (!noiseless || empirical_gram_error <= NOISELESS_TOLERANCE);
    Ok(FactorizationReport {
        n,
        seed,
        error,
        empirical_gram_error,
        bound,
        noiseless,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoactivationReport {
    pub gate: usize,
    pub n: usize,
    pub samples_with_gate: usize,
    /// `||E_hat[delta | g_i = 1] - c Sigma beta_i||`.
    pub measured_deviation: f64,
    /// Same quantity in closed form.
    pub population_deviation: f64,
    /// `c ||Sigma||_2 sum_{i' != i} pi_{i'|i} ||beta_i'||`.
    pub bound: f64,
    pub passed: bool,
}

const BOUND_SLACK: f64 = 1e-9;

pub fn check_coactivation_bound(world: &SyntheticWorld, gate: usize, n: usize, seed: u64) -> Result<CoactivationReport> {
    let pi = world.coactivation(gate)?;
    if n == 0 {
        return Err(DspaError::invalid("sample count must be at least 1"));
    }
    let d = world.d;
    let own: DVector<f64> = world.shift().column(gate).into_owned();

    let mut rng = trial_rng(seed, 0);
    let mut sum = vec![0.0; d];
    let mut hits = 0usize;
    for _ in 0..n {
        let active = world.sample_gates(&mut rng);
        let delta = world.sample_delta(&active, &mut rng);
        if active.binary_search(&gate).is_ok() {
            hits += 1;
            for (s, v) in sum.iter_mut().zip(&delta) {
                *s += v;
            }
        }
    }
    if hits == 0 {
        return Err(DspaError::invalid(format!("no samples with gate {gate} on among {n}")));
    }
    let estimate = DVector::from_iterator(d, sum.iter().map(|s| s / hits as f64));
    let measured_deviation = (estimate - &own).norm();

    let population = DVector::from_vec(world.conditional_mean(gate)?);
    let population_deviation = (population - &own).norm();

    let sigma_norm = world.sigma.singular_values().max();
    let contamination: f64 = (0..d)
        .filter(|&j| j != gate)
        .map(|j| pi[j] * world.b.column(j).norm())
        .sum();
    let bound = world.c * sigma_norm * contamination;
    Ok(CoactivationReport {
        gate,
        n,
        samples_with_gate: hits,
        measured_deviation,
        population_deviation,
        bound,
        passed: population_deviation <= bound * (1.0 + BOUND_SLACK) + BOUND_SLACK,
    })
}

/// `sqrt(2 ln(2d / delta) / n_i)`.
pub fn concentration_bound(d: usize, delta: f64, n_i: usize) -> f64 {
    (2.0 * (2.0 * d as f64 / delta).ln() / n_i as f64).sqrt()
}

/// `1 - delta - 3 sigma` with the binomial standard deviation at `trials`.
pub fn default_min_coverage(delta: f64, trials: usize) -> f64 {
    1.0 - delta - 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub gate: usize,
    pub n_i: usize,
    pub trials: usize,
    pub delta: f64,
    pub bound: f64,
    pub covered: usize,
    pub coverage: f64,
    pub min_coverage: f64,
    pub reference: ReferenceKind,
    pub passed: bool,
}

/// Conditional row mean over `n` draws with `g_gate = 1`.
fn conditional_row(world: &SyntheticWorld, gate: usize, n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; world.d];
    for _ in 0..n {
        let active = world.sample_gates_given(gate, rng)?;
        for (s, v) in sum.iter_mut().zip(world.sample_delta(&active, rng)) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Population row `E[delta_rho | g_gate = 1]`: closed form without clipping,
/// otherwise a large fixed-seed Monte-Carlo estimate.
pub fn reference_row(world: &SyntheticWorld, gate: usize, seed: u64) -> Result<(Vec<f64>, ReferenceKind)> {
    if !world.clip {
        return Ok((world.conditional_mean(gate)?, ReferenceKind::Exact));
    }
    let per = REFERENCE_SAMPLES / REFERENCE_CHUNKS;
    let chunks: Vec<Vec<f64>> = (0..REFERENCE_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = trial_rng(seed ^ 0x5EED_0F_AE5E, c as u64);
            conditional_row(world, gate, per, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; world.d];
    for chunk in &chunks {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v / REFERENCE_CHUNKS as f64;
        }
    }
    Ok((mean, ReferenceKind::MonteCarlo))
}

/// Fraction of `trials` independent datasets of `n_i` gated samples whose
/// row estimate lies within the concentration bound in max norm.
pub fn check_concentration(
    world: &SyntheticWorld,
    gate: usize,
    n_i: usize,
    trials: usize,
    delta: f64,
    seed: u64,
    min_coverage: Option<f64>,
) -> Result<ConcentrationReport> {
    if trials < 100 {
        return Err(DspaError::invalid(format!("need at least 100 trials, got {trials}")));
    }
    if n_i == 0 {
        return Err(DspaError::invalid("n_i must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DspaError::invalid(format!("delta = {delta} must be in (0, 1)")));
    }
    world.check_gate(gate)?;
    let (reference, kind) = reference_row(world, gate, seed)?;
    let bound = concentration_bound(world.d, delta, n_i);
    let hits: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64 + 1);
            let row = conditional_row(world, gate, n_i, &mut rng)?;
            let worst = row.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(worst <= bound)
        })
        .collect::<Result<_>>()?;
    let covered = hits.iter().filter(|&&h| h).count();
    let coverage = covered as f64 / trials as f64;
    let min_coverage = min_coverage.unwrap_or_else(|| default_min_coverage(delta, trials));
    Ok(ConcentrationReport {
        gate,
        n_i,
        trials,
        delta,
        bound,
        covered,
        coverage,
        min_coverage,
        reference: kind,
        passed: coverage >= min_coverage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityModel {
    pub beta: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    pub k: usize,
    pub optimal: bool,
    /// Best subset by exhaustive search, lexicographically first among ties.
    pub best: Vec<usize>,
    pub bottom_k: Vec<usize>,
    /// `-delta * sum_{j in best} beta_j`.
    pub improvement: f64,
    pub witness: Option<Vec<usize>>,
}

pub const MAX_TOPK_DIM: usize = 20;

/// Canonical subset score: values summed in sorted order so equal multisets
/// score identically.
fn subset_gain(beta: &[f64], subset: &[usize], delta: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(subset.iter().map(|&j| beta[j]));
    scratch.sort_by(f64::total_cmp);
    -delta * scratch.iter().sum::<f64>()
}

/// Exhaustive search over all `k`-subsets for the best ablation set.
pub fn check_topk_optimality(utility: &UtilityModel, k: usize) -> Result<TopkReport> {
    let d = utility.beta.len();
    if d == 0 || d > MAX_TOPK_DIM {
        return Err(DspaError::invalid(format!("exhaustive search needs 1 <= d <= {MAX_TOPK_DIM}, got {d}")));
    }
    if k == 0 || k > d {
        return Err(DspaError::invalid(format!("k = {k} must be in 1..={d}")));
    }
    if !(utility.delta > 0.0 && utility.delta.is_finite()) {
        return Err(DspaError::invalid(format!("delta = {} must be positive", utility.delta)));
    }
    if utility.beta.iter().any(|b| !b.is_finite()) {
        return Err(DspaError::NonFinite("utility weights".into()));
    }
    let mut scratch = Vec::with_capacity(k);
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = subset.clone();
    let mut best_gain = subset_gain(&utility.beta, &subset, utility.delta, &mut scratch);
    loop {
        // Next combination in lexicographic order.
        let mut pos = k;
        while pos > 0 && subset[pos - 1] == d - k + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        subset[pos - 1] += 1;
        for q in pos..k {
            subset[q] = subset[q - 1] + 1;
        }
        let gain = subset_gain(&utility.beta, &subset, utility.delta, &mut scratch);
        if gain > best_gain {
            best_gain = gain;
            best.clone_from(&subset);
        }
    }
    let mut chosen = bottom_k(&utility.beta, k);
    chosen.sort_unstable();
    let optimal = chosen == best;
    Ok(TopkReport {
        k,
        witness: (!optimal).then(|| best.clone()),
        optimal,
        best,
        bottom_k: chosen,
        improvement: best_gain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkFailure {
    pub beta: Vec<f64>,
    pub k: usize,
    pub witness: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkSweepReport {
    pub cases: usize,
    pub agreements: usize,
    pub max_dim: usize,
    pub max_k: usize,
    pub failures: Vec<TopkFailure>,
    pub passed: bool,
}

/// Random utility vectors with `d <= max_dim`, `k <= max_k`. A quarter of the
/// cases are rounded to one decimal so ties occur.
pub fn topk_sweep(cases: usize, max_dim: usize, max_k: usize, seed: u64) -> Result<TopkSweepReport> {
    if max_dim == 0 || max_dim > MAX_TOPK_DIM || max_k == 0 {
        return Err(DspaError::invalid("sweep needs 1 <= max_dim <= 20 and max_k >= 1"));
    }
    let results: Vec<Option<TopkFailure>> = (0..cases)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let d = rng.random_range(1..=max_dim);
            let k = rng.random_range(1..=max_k.min(d));
            let tied = t % 4 == 3;
            let beta: Vec<f64> = (0..d)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if tied {
                        (v * 10.0).round() / 10.0
                    } else {
                        v
                    }
                })
                .collect();
            let delta = rng.random_range(0.01..1.0);
            let r = check_topk_optimality(&UtilityModel { beta: beta.clone(), delta }, k)?;
            Ok(r.witness.map(|witness| TopkFailure { beta, k, witness }))
        })
        .collect::<Result<_>>()?;
    let failures: Vec<TopkFailure> = results.into_iter().flatten().collect();
    Ok(TopkSweepReport {
        cases,
        agreements: cases - failures.len(),
        max_dim,
        max_k,
        passed: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemixReport {
    pub n: usize,
    pub subset: Vec<usize>,
    pub relative_error: f64,
    /// `||M_{S^c, S}||_F` from the closed-form Gram; recovery assumes zero.
    pub cross_gram_norm: f64,
}

/// Builds a map from `n` synthetic samples and compares the de-mixed score for
/// `g_S = 1` against `c * Sigma * B_S * 1`.
pub fn check_demixing(world: &SyntheticWorld, subset: &[usize], n: usize, seed: u64) -> Result<DemixReport> {
    if subset.is_empty() {
        return Err(DspaError::Empty("de-mixing subset"));
    }
    for &i in subset {
        world.check_gate(i)?;
    }
    let sm = synthetic_map(world, n, seed)?;
    let gram = estimate_gram_restricted(&sm.gates, subset)?;
    let map: DiffMap = sm.map.finish(0)?;
    let ones = vec![1.0; subset.len()];
    let scores = demix_scores(&map, &gram, subset, &ones, DEFAULT_RIDGE)?;

    let mut target = DVector::zeros(world.d);
    for &i in subset {
        target += world.shift().column(i);
    }
    let err = DVector::from_vec(scores) - &target;
    let relative_error = err.norm() / target.norm();

    let m = world.gram();
    let cross: f64 = (0..world.d)
        .filter(|j| !subset.contains(j))
        .flat_map(|j| subset.iter().map(move |&i| (j, i)))
        .map(|(j, i)| m[(j, i)] * m[(j, i)])
        .sum();
    Ok(DemixReport {
        n,
        subset: subset.to_vec(),
        relative_error,
        cross_gram_norm: cross.sqrt(),
    })
}
