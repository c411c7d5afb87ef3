//! Empirical gate Gram matrix `M = E[g g^T]`, optionally restricted to an
//! index subset.

use crate::density::GateVector;
use crate::error::{ensure_dims, DspaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    /// Feature index of each row/column.
    pub indices: Vec<usize>,
    /// Row-major `|indices| x |indices|`.
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.dim() + b]
    }

    /// Sub-matrix on `subset`; every element must be one of `self.indices`.
    pub fn restrict(&self, subset: &[usize]) -> Result<GramMatrix> {
        let pos: Vec<usize> = subset
            .iter()
            .map(|i| {
                self.indices
                    .iter()
                    .position(|j| j == i)
                    .ok_or_else(|| DspaError::invalid(format!("feature {i} not covered by gram matrix")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(pos.len() * pos.len());
        for &a in &pos {
            for &b in &pos {
                values.push(self.get(a, b));
            }
        }
        Ok(GramMatrix {
            indices: subset.to_vec(),
            values,
        })
    }
}

/// `M = (1/N) sum_k g_k g_k^T` over all features.
pub fn estimate_gram(gates: &[GateVector]) -> Result<GramMatrix> {
    let d = gates.first().ok_or(DspaError::Empty("gate set"))?.len();
    estimate_gram_restricted(gates, &(0..d).collect::<Vec<_>>())
}

/// `M_S` on the features in `subset`, without materialising the full matrix.
pub fn estimate_gram_restricted(gates: &[GateVector], subset: &[usize]) -> Result<GramMatrix> {
    let d = gates.first().ok_or(DspaError::Empty("gate set"))?.len();
    if let Some(&bad) = subset.iter().find(|&&i| i >= d) {
        return Err(DspaError::invalid(format!("feature {bad} out of range for d = {d}")));
    }
    let s = subset.len();
    let mut counts = vec![0u64; s * s];
    let mut on = Vec::with_capacity(s);
    for g in gates {
        ensure_dims("gate vector", d, g.len())?;
        on.clear();
        on.extend((0..s).filter(|&a| g.0[subset[a]]));
        for &a in &on {
            for &b in &on {
                counts[a * s + b] += 1;
            }
        }
    }
    let n = gates.len() as f64;
    Ok(GramMatrix {
        indices: subset.to_vec(),
        values: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}
