//! Global augment/ablate sets from map column sums, overlaps between maps,
//! per-plan coverage, and high-activation evidence for single features.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff_map::DiffMap;
use crate::error::{ensure_dims, DspaError, Result};
use crate::sae::SaeParams;
use crate::select::{bottom_k, top_k};
use crate::steering::SteeringPlan;
use crate::trace::{ActivationTrace, Segment};

pub const DEFAULT_SET_SIZE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSets {
    pub d_sae: usize,
    pub set_size: usize,
    /// Largest column sums first.
    pub augment: Vec<usize>,
    /// Smallest column sums first, never overlapping `augment`.
    pub ablate: Vec<usize>,
    pub augment_magnitudes: Vec<f64>,
    pub ablate_magnitudes: Vec<f64>,
    /// The two rankings collided and ties decided the split.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Ranks columns by `sum_i A_ij` over stored entries.
pub fn rank_columns(map: &DiffMap, set_size: usize) -> Result<AuditSets> {
    let d = map.d_sae();
    if set_size == 0 || set_size > d / 2 {
        return Err(DspaError::invalid(format!(
            "set size {set_size} must be in 1..={} for d_sae = {d}",
            d / 2
        )));
    }
    let sums = map.column_sums();
    let augment = top_k(&sums, set_size);
    let taken: BTreeSet<usize> = augment.iter().copied().collect();
    let naive = bottom_k(&sums, set_size);
    let degenerate = naive.iter().any(|j| taken.contains(j));
    let ablate = if degenerate {
        let rest: Vec<usize> = (0..d).filter(|j| !taken.contains(j)).collect();
        let rest_sums: Vec<f64> = rest.iter().map(|&j| sums[j]).collect();
        bottom_k(&rest_sums, set_size).into_iter().map(|r| rest[r]).collect()
    } else {
        naive
    };
    let warning = map.is_sparsified().then(|| {
        format!(
            "map was sparsified (tau = {}); column sums cover surviving entries only",
            map.sparsify_tau
        )
    });
    Ok(AuditSets {
        d_sae: d,
        set_size,
        augment_magnitudes: augment.iter().map(|&j| sums[j].abs()).collect(),
        ablate_magnitudes: ablate.iter().map(|&j| sums[j].abs()).collect(),
        augment,
        ablate,
        degenerate,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetOverlap {
    pub augment: usize,
    pub ablate: usize,
}

fn intersection(a: &[usize], b: &[usize]) -> usize {
    let b: BTreeSet<usize> = b.iter().copied().collect();
    a.iter().collect::<BTreeSet<_>>().into_iter().filter(|j| b.contains(j)).count()
}

pub fn set_overlap(a: &AuditSets, b: &AuditSets) -> Result<SetOverlap> {
    ensure_dims("audit set width", a.d_sae, b.d_sae)?;
    Ok(SetOverlap {
        augment: intersection(&a.augment, &b.augment),
        ablate: intersection(&a.ablate, &b.ablate),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCoverage {
    pub plan: usize,
    /// Selected augment features missing from the global augment set.
    pub augment_outside: Vec<usize>,
    pub ablate_outside: Vec<usize>,
    pub ablate_strict_subset: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CoverageReport {
    pub plans: Vec<PlanCoverage>,
    pub selected: usize,
    pub violations: usize,
    pub fully_covered: usize,
}

/// Which of each plan's active selections fall outside the global sets.
pub fn coverage_check(plans: &[SteeringPlan], sets: &AuditSets) -> Result<CoverageReport> {
    let up: BTreeSet<usize> = sets.augment.iter().copied().collect();
    let down: BTreeSet<usize> = sets.ablate.iter().copied().collect();
    for p in plans {
        ensure_dims("plan scores vs audit sets", sets.d_sae, p.scores.len())?;
    }
    let rows: Vec<(PlanCoverage, usize)> = plans
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let aug: &[usize] = if p.mode.augments() { &p.augment } else { &[] };
            let abl: &[usize] = if p.mode.ablates() { &p.ablate } else { &[] };
            let mut augment_outside: Vec<usize> = aug.iter().copied().filter(|j| !up.contains(j)).collect();
            let mut ablate_outside: Vec<usize> = abl.iter().copied().filter(|j| !down.contains(j)).collect();
            augment_outside.sort_unstable();
            ablate_outside.sort_unstable();
            let distinct: BTreeSet<usize> = abl.iter().copied().collect();
            let ablate_strict_subset = ablate_outside.is_empty() && distinct.len() < down.len();
            (
                PlanCoverage {
                    plan: k,
                    augment_outside,
                    ablate_outside,
                    ablate_strict_subset,
                },
                aug.len() + abl.len(),
            )
        })
        .collect();
    let mut report = CoverageReport::default();
    for (row, selected) in rows {
        let v = row.augment_outside.len() + row.ablate_outside.len();
        report.selected += selected;
        report.violations += v;
        if v == 0 {
            report.fully_covered += 1;
        }
        report.plans.push(row);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub trace: usize,
    pub token: usize,
    pub segment: Segment,
    pub activation: f32,
}

/// The `top_n` highest activations of `feature` across output-layer traces,
/// descending, ties by trace then token.
pub fn export_evidence(
    map: &DiffMap,
    sae: &SaeParams,
    traces: &[ActivationTrace],
    feature: usize,
    top_n: usize,
) -> Result<Vec<EvidenceRecord>> {
    ensure_dims("map vs SAE width", map.d_sae(), sae.d_sae())?;
    if feature >= map.d_sae() {
        return Err(DspaError::invalid(format!(
            "feature {feature} out of range for d_sae = {}",
            map.d_sae()
        )));
    }
    let per_trace: Vec<Vec<EvidenceRecord>> = traces
        .par_iter()
        .enumerate()
        .map(|(k, tr)| {
            let mut out = Vec::new();
            for (t, h) in tr.rows().enumerate() {
                let v = sae.encode(h)?.values()[feature];
                if v > 0.0 {
                    out.push(EvidenceRecord {
                        trace: k,
                        token: t,
                        segment: if t < tr.prompt_len() { Segment::Prompt } else { Segment::Response },
                        activation: v,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<EvidenceRecord> = per_trace.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then(a.trace.cmp(&b.trace))
            .then(a.token.cmp(&b.token))
    });
    all.truncate(top_n);
    Ok(all)
}
