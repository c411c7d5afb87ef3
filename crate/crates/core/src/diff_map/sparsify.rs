//! Conservative magnitude sparsification.
//!
//! For each row, the boundary entries are those at or above the row's
//! `k`-th largest value or at or below its `k`-th smallest value (implicit
//! zeros included when ranking). The cut `tau` is the smallest nonzero
//! magnitude over all boundary entries of all rows; every entry with
//! `|A_ij| < tau` is dropped. Boundary entries therefore always survive.

use super::DiffMap;
use crate::error::{DspaError, Result};

/// `k`-th largest (1-based) of a row given its stored values sorted
/// descending and the number of implicit zeros.
fn kth_largest(sorted_desc: &[f32], implicit_zeros: usize, k: usize) -> f32 {
    let split = sorted_desc.partition_point(|&v| v >= 0.0);
    let idx = k - 1;
    if idx < split {
        sorted_desc[idx]
    } else if idx < split + implicit_zeros {
        0.0
    } else {
        sorted_desc[idx - implicit_zeros]
    }
}

/// The cut a call to [`sparsify`] would apply. Zero when the map has no
/// nonzero boundary entry.
pub fn sparsify_threshold(map: &DiffMap, k_diff: usize) -> Result<f32> {
    let d = map.d_sae();
    if k_diff == 0 || k_diff > d {
        return Err(DspaError::invalid(format!("k_diff = {k_diff} must be in 1..={d}")));
    }
    let mut tau = f32::INFINITY;
    let mut sorted = Vec::new();
    for i in 0..d {
        let (_, vals) = map.row(i);
        if vals.iter().all(|&v| v == 0.0) {
            continue;
        }
        sorted.clear();
        sorted.extend_from_slice(vals);
        sorted.sort_by(|a, b| b.total_cmp(a));
        let zeros = d - vals.len();
        let hi = kth_largest(&sorted, zeros, k_diff);
        let lo = kth_largest(&sorted, zeros, d - k_diff + 1);
        for &v in vals {
            if v != 0.0 && (v >= hi || v <= lo) {
                tau = tau.min(v.abs());
            }
        }
    }
    Ok(if tau.is_finite() { tau } else { 0.0 })
}

/// Drops every entry below the boundary cut. Surviving values are unchanged.
pub fn sparsify(map: &DiffMap, k_diff: usize) -> Result<DiffMap> {
    let tau = sparsify_threshold(map, k_diff)?;
    let d = map.d_sae();
    let mut row_ptr = Vec::with_capacity(d + 1);
    row_ptr.push(0u64);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    for i in 0..d {
        let (cols, vals) = map.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if v.abs() >= tau && v != 0.0 {
                col_idx.push(j);
                values.push(v);
            }
        }
        row_ptr.push(values.len() as u64);
    }
    let mut out = DiffMap::from_csr(
        d,
        row_ptr,
        col_idx,
        values,
        map.n_triples,
        map.thresholds.clone(),
        map.gate_support.clone(),
        map.input_layer_tag.clone(),
        map.output_layer_tag.clone(),
    )?;
    out.support_floor = map.support_floor;
    out.sparsify_tau = map.sparsify_tau.max(tau as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let rows = vec![
            vec![0.5, 0.1, -0.4],
            vec![0.2, -0.3, 0.05],
            vec![0.0, 0.0, 0.0],
        ];
        let map = DiffMap::from_dense(&rows).unwrap();
        assert_eq!(sparsify_threshold(&map, 1).unwrap(), 0.2);
        let s = sparsify(&map, 1).unwrap();
        assert_eq!(
            s.to_dense(),
            vec![vec![0.5, 0.0, -0.4], vec![0.2, -0.3, 0.0], vec![0.0; 3]]
        );
        assert_eq!(s.sparsify_tau, 0.2f32 as f64);
        assert_eq!(sparsify(&s, 1).unwrap().to_dense(), s.to_dense());
    }

    #[test]
    fn k_equal_to_width_keeps_everything() {
        let rows = vec![vec![0.5, 0.1, -0.4], vec![0.2, -0.3, 0.05], vec![0.0, 1e-6, 0.0]];
        let map = DiffMap::from_dense(&rows).unwrap();
        assert_eq!(sparsify(&map, 3).unwrap().to_dense(), rows);
        assert!(sparsify(&map, 4).is_err());
        assert!(sparsify(&map, 0).is_err());
    }

    #[test]
    fn zero_map_is_untouched() {
        let map = DiffMap::from_dense(&[vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert_eq!(sparsify_threshold(&map, 1).unwrap(), 0.0);
        assert_eq!(sparsify(&map, 1).unwrap().nnz(), 0);
    }

    fn kth_oracle(row: &[f32], k: usize, largest: bool) -> f32 {
        let mut v = row.to_vec();
        v.sort_by(|a, b| if largest { b.total_cmp(a) } else { a.total_cmp(b) });
        v[k - 1]
    }

    fn sparse_rows() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (2usize..9).prop_flat_map(|d| {
            prop::collection::vec(
                prop::collection::vec(prop_oneof![3 => Just(0.0f32), 2 => -1.0f32..1.0], d),
                d,
            )
        })
    }

    proptest! {
        #[test]
        fn extremes_survive_and_values_unchanged(rows in sparse_rows(), k in 1usize..9) {
            let d = rows.len();
            let k = k.min(d);
            let map = DiffMap::from_dense(&rows).unwrap();
            let s = sparsify(&map, k).unwrap();
            let out = s.to_dense();
            for (i, row) in rows.iter().enumerate() {
                let hi = kth_oracle(row, k, true);
                let lo = kth_oracle(row, k, false);
                for j in 0..d {
                    let v = row[j];
                    prop_assert!(out[i][j] == v || out[i][j] == 0.0);
                    if v >= hi || v <= lo {
                        prop_assert_eq!(out[i][j], v, "boundary entry ({}, {}) dropped", i, j);
                    }
                    if out[i][j] != 0.0 {
                        prop_assert!(out[i][j].abs() as f64 >= s.sparsify_tau);
                    }
                }
            }
        }

        #[test]
        fn idempotent_on_rows_with_zeros(rows in sparse_rows(), k in 1usize..9) {
            // Every row keeps at least one zero, so zeroing interior entries
            // cannot move a row's boundary.
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r[0] = 0.0; r }).collect();
            let k = k.min(rows.len());
            let once = sparsify(&DiffMap::from_dense(&rows).unwrap(), k).unwrap();
            let twice = sparsify(&once, k).unwrap();
            prop_assert_eq!(once.to_dense(), twice.to_dense());
        }
    }
}
