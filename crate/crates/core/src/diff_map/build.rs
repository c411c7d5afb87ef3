//! Two-pass construction of the conditional-difference map.
//!
//! Pass 1 computes every prompt density and fits the gate thresholds. Pass 2
//! accumulates `sum_k g_i(x_k) * delta_rho_k[j]` into per-row hash maps keyed
//! by output column, so only columns with a nonzero response-density
//! difference are ever touched.
//!
//! Triples are cut into fixed-size parts in manifest order. Each part is
//! accumulated sequentially in f64; parts are then merged along a fixed binary
//! tree over part indices. The part layout depends only on the triple count,
//! so the result is bit-identical for any number of worker threads.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::DiffMap;
use crate::density::{self, GateThresholds, DEFAULT_PERCENTILE};
use crate::error::{DspaError, Result};
use crate::sae::SaeParams;
use crate::trace::{ActivationTrace, Manifest, PreferenceTriple, Segment};

pub const DEFAULT_PART_SIZE: usize = 64;
pub const DEFAULT_SUPPORT_FLOOR: u64 = 5;

/// Random access to preference triples, in manifest order.
pub trait TripleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt-only trace at the input layer.
    fn prompt(&self, k: usize) -> Result<Cow<'_, ActivationTrace>>;

    /// Chosen and rejected traces at the output layer.
    fn responses(&self, k: usize, prompt_tokens: usize) -> Result<(Cow<'_, ActivationTrace>, Cow<'_, ActivationTrace>)>;
}

impl TripleSource for [PreferenceTriple] {
    fn len(&self) -> usize {
        <[PreferenceTriple]>::len(self)
    }

    fn prompt(&self, k: usize) -> Result<Cow<'_, ActivationTrace>> {
        Ok(Cow::Borrowed(&self[k].prompt))
    }

    fn responses(&self, k: usize, _prompt_tokens: usize) -> Result<(Cow<'_, ActivationTrace>, Cow<'_, ActivationTrace>)> {
        Ok((Cow::Borrowed(&self[k].chosen), Cow::Borrowed(&self[k].rejected)))
    }
}

impl TripleSource for Manifest {
    fn len(&self) -> usize {
        Manifest::len(self)
    }

    fn prompt(&self, k: usize) -> Result<Cow<'_, ActivationTrace>> {
        self.load_prompt(k).map(Cow::Owned)
    }

    fn responses(&self, k: usize, prompt_tokens: usize) -> Result<(Cow<'_, ActivationTrace>, Cow<'_, ActivationTrace>)> {
        let (c, r) = self.load_responses(k, prompt_tokens)?;
        Ok((Cow::Owned(c), Cow::Owned(r)))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub percentile: f64,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub workers: usize,
    pub part_size: usize,
    pub support_floor: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            percentile: DEFAULT_PERCENTILE,
            workers: 0,
            part_size: DEFAULT_PART_SIZE,
            support_floor: DEFAULT_SUPPORT_FLOOR,
        }
    }
}

/// Un-normalised partial sums over a contiguous run of triples.
#[derive(Debug, Clone)]
pub struct PartialMap {
    d_sae: usize,
    count: usize,
    rows: Vec<HashMap<u32, f64>>,
    gate_support: Vec<u64>,
    thresholds: Arc<GateThresholds>,
    input_layer_tag: Option<String>,
    output_layer_tag: Option<String>,
}

impl PartialMap {
    pub fn new(d_sae: usize, thresholds: Arc<GateThresholds>) -> Self {
        Self {
            d_sae,
            count: 0,
            rows: vec![HashMap::new(); d_sae],
            gate_support: vec![0; d_sae],
            thresholds,
            input_layer_tag: None,
            output_layer_tag: None,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds one triple: `delta` (sparse, `(column, value)`) goes into every
    /// row whose gate is on.
    pub fn add(&mut self, gates: impl IntoIterator<Item = usize>, delta: &[(u32, f64)]) {
        self.count += 1;
        for i in gates {
            self.gate_support[i] += 1;
            let row = &mut self.rows[i];
            for &(j, v) in delta {
                *row.entry(j).or_insert(0.0) += v;
            }
        }
    }

    fn set_tag(slot: &mut Option<String>, tag: &str) -> Result<()> {
        match slot {
            Some(t) if t != tag => Err(DspaError::invalid(format!(
                "layer tag {tag:?} differs from {t:?} seen earlier"
            ))),
            Some(_) => Ok(()),
            None => {
                *slot = Some(tag.to_string());
                Ok(())
            }
        }
    }

    /// Folds `other` into `self`. Each entry sees exactly one addition, and
    /// IEEE addition is commutative, so hash iteration order is irrelevant.
    fn absorb(&mut self, other: PartialMap) -> Result<()> {
        if !(Arc::ptr_eq(&self.thresholds, &other.thresholds) || *self.thresholds == *other.thresholds) {
            return Err(DspaError::ThresholdMismatch);
        }
        if self.d_sae != other.d_sae {
            return Err(DspaError::dims("partial map d_sae", self.d_sae, other.d_sae));
        }
        if let Some(t) = &other.input_layer_tag {
            Self::set_tag(&mut self.input_layer_tag, t)?;
        }
        if let Some(t) = &other.output_layer_tag {
            Self::set_tag(&mut self.output_layer_tag, t)?;
        }
        self.count += other.count;
        for (a, b) in self.gate_support.iter_mut().zip(&other.gate_support) {
            *a += b;
        }
        for (mine, theirs) in self.rows.iter_mut().zip(other.rows) {
            if mine.is_empty() {
                *mine = theirs;
                continue;
            }
            for (j, v) in theirs {
                *mine.entry(j).or_insert(0.0) += v;
            }
        }
        Ok(())
    }

    /// Row-major dense `A = sums / N` in f64.
    pub fn to_dense_f64(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(DspaError::Empty("triple set"));
        }
        let n = self.count as f64;
        let mut out = vec![0.0; self.d_sae * self.d_sae];
        for (i, row) in self.rows.iter().enumerate() {
            for (&j, &v) in row {
                out[i * self.d_sae + j as usize] = v / n;
            }
        }
        Ok(out)
    }

    /// Normalises by the triple count and rounds to f32. Exact-zero sums are
    /// not stored.
    pub fn finish(self, support_floor: u64) -> Result<DiffMap> {
        if self.count == 0 {
            return Err(DspaError::Empty("triple set"));
        }
        let n = self.count as f64;
        let mut row_ptr = Vec::with_capacity(self.d_sae + 1);
        row_ptr.push(0u64);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for row in &self.rows {
            let mut entries: Vec<(u32, f64)> = row.iter().map(|(&j, &v)| (j, v)).collect();
            entries.sort_unstable_by_key(|e| e.0);
            for (j, v) in entries {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push((v / n) as f32);
                }
            }
            row_ptr.push(values.len() as u64);
        }
        let thresholds = Arc::try_unwrap(self.thresholds).unwrap_or_else(|a| (*a).clone());
        let mut map = DiffMap::from_csr(
            self.d_sae,
            row_ptr,
            col_idx,
            values,
            self.count,
            thresholds,
            self.gate_support,
            self.input_layer_tag.unwrap_or_default(),
            self.output_layer_tag.unwrap_or_default(),
        )?;
        map.support_floor = support_floor;
        Ok(map)
    }
}

fn merge_tree(mut parts: Vec<PartialMap>) -> Result<PartialMap> {
    match parts.len() {
        0 => Err(DspaError::Empty("partial map list")),
        1 => Ok(parts.pop().expect("one part")),
        n => {
            let right = parts.split_off(n.div_ceil(2));
            let (l, r) = rayon::join(|| merge_tree(parts), || merge_tree(right));
            let mut l = l?;
            l.absorb(r?)?;
            Ok(l)
        }
    }
}

/// Exact merge of partial sums along the fixed binary tree over part indices
/// (left half gets the extra part when the count is odd).
pub fn merge_partial_maps(parts: Vec<PartialMap>, support_floor: u64) -> Result<DiffMap> {
    merge_tree(parts)?.finish(support_floor)
}

/// `rho(chosen) - rho(rejected)` restricted to its nonzero entries.
fn density_difference(chosen: &[f64], rejected: &[f64]) -> Vec<(u32, f64)> {
    chosen
        .iter()
        .zip(rejected)
        .enumerate()
        .filter_map(|(j, (&c, &r))| {
            let d = c - r;
            (d != 0.0).then_some((j as u32, d))
        })
        .collect()
}

struct PromptPass {
    densities: Vec<Vec<(u32, f64)>>,
    token_counts: Vec<usize>,
    layer_tag: String,
}

fn prompt_pass<S: TripleSource + ?Sized>(source: &S, input_sae: &SaeParams) -> Result<PromptPass> {
    let per_triple: Vec<Result<(Vec<(u32, f64)>, usize, String)>> = (0..source.len())
        .into_par_iter()
        .map(|k| {
            let prompt = source.prompt(k)?;
            let rho = density::density(input_sae, &prompt, Segment::Prompt)?;
            Ok((rho.nonzero(), prompt.token_count(), prompt.layer_tag().to_string()))
        })
        .collect();
    let mut densities = Vec::with_capacity(per_triple.len());
    let mut token_counts = Vec::with_capacity(per_triple.len());
    let mut layer_tag: Option<String> = None;
    for r in per_triple {
        let (rho, t, tag) = r?;
        PartialMap::set_tag(&mut layer_tag, &tag)?;
        densities.push(rho);
        token_counts.push(t);
    }
    Ok(PromptPass {
        densities,
        token_counts,
        layer_tag: layer_tag.unwrap_or_default(),
    })
}

fn build_inner<S: TripleSource + ?Sized>(
    source: &S,
    input_sae: &SaeParams,
    output_sae: &SaeParams,
    opts: &BuildOptions,
) -> Result<DiffMap> {
    if source.is_empty() {
        return Err(DspaError::Empty("triple set"));
    }
    if input_sae.d_sae() != output_sae.d_sae() {
        return Err(DspaError::dims(
            "output SAE width vs input SAE width",
            input_sae.d_sae(),
            output_sae.d_sae(),
        ));
    }
    if opts.part_size == 0 {
        return Err(DspaError::invalid("part_size must be positive"));
    }
    let d = input_sae.d_sae();

    let pass1 = prompt_pass(source, input_sae)?;
    let thresholds = Arc::new(density::fit_thresholds_sparse(d, &pass1.densities, opts.percentile)?);
    // Gates with tau = 0 are on for every prompt (densities are >= 0).
    let always_on: Vec<usize> = (0..d).filter(|&i| thresholds.tau[i] <= 0.0).collect();

    let n = source.len();
    let parts: Vec<Result<PartialMap>> = (0..n.div_ceil(opts.part_size))
        .into_par_iter()
        .map(|p| {
            let mut part = PartialMap::new(d, Arc::clone(&thresholds));
            part.input_layer_tag = Some(pass1.layer_tag.clone());
            for k in p * opts.part_size..((p + 1) * opts.part_size).min(n) {
                let (chosen, rejected) = source.responses(k, pass1.token_counts[k])?;
                PartialMap::set_tag(&mut part.output_layer_tag, chosen.layer_tag())?;
                let rho_c = density::density(output_sae, &chosen, Segment::Response)?;
                let rho_r = density::density(output_sae, &rejected, Segment::Response)?;
                let delta = density_difference(&rho_c.values, &rho_r.values);
                let gated = pass1.densities[k]
                    .iter()
                    .filter(|&&(i, rho)| {
                        let tau = thresholds.tau[i as usize];
                        tau > 0.0 && rho >= tau
                    })
                    .map(|&(i, _)| i as usize);
                part.add(always_on.iter().copied().chain(gated), &delta);
            }
            Ok(part)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    merge_partial_maps(parts, opts.support_floor)
}

/// Builds `A = (1/N) sum_k g(x_k) delta_rho_k^T` from preference triples.
pub fn build_map<S: TripleSource + ?Sized>(
    source: &S,
    input_sae: &SaeParams,
    output_sae: &SaeParams,
    opts: &BuildOptions,
) -> Result<DiffMap> {
    if opts.workers == 0 {
        return build_inner(source, input_sae, output_sae, opts);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| DspaError::invalid(format!("cannot start worker pool: {e}")))?
        .install(|| build_inner(source, input_sae, output_sae, opts))
}
