//! The conditional-difference map `A` (rows = input features, columns =
//! output features) in CSR layout, plus its `DSPM` file format.
//!
//! ```text
//! b"DSPM" | u32 version (=1) | u64 header_len | header JSON
//!        | row_ptr: u64 x (d_sae + 1) | col_idx: u32 x nnz | values: f32 x nnz
//! ```

mod build;
mod sparsify;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_file, Cursor};
use crate::density::GateThresholds;
use crate::error::{ensure_dims, DspaError, Result};

pub use build::{
    build_map, merge_partial_maps, BuildOptions, PartialMap, TripleSource, DEFAULT_PART_SIZE,
    DEFAULT_SUPPORT_FLOOR,
};
pub use sparsify::{sparsify, sparsify_threshold};

pub const MAP_MAGIC: &[u8; 4] = b"DSPM";
pub const MAP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    d_sae: usize,
    row_ptr: Vec<u64>,
    col_idx: Vec<u32>,
    values: Vec<f32>,
    pub n_triples: usize,
    pub thresholds: GateThresholds,
    /// `N_i`: number of triples whose prompt gate `i` was on.
    pub gate_support: Vec<u64>,
    /// Magnitude cut applied by [`sparsify`]; 0 for a dense map.
    pub sparsify_tau: f64,
    pub support_floor: u64,
    pub input_layer_tag: String,
    pub output_layer_tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    #[serde(rename = "N")]
    n: usize,
    p: f64,
    sparsify_tau: f64,
    input_layer_tag: String,
    output_layer_tag: String,
    d_sae: usize,
    nnz: usize,
    gate_support: Vec<u64>,
    tau: Vec<f64>,
    support_floor: u64,
    low_support_rows: Vec<u32>,
}

impl DiffMap {
    /// Assembles a map from raw CSR arrays, validating structure.
    #[allow(clippy::too_many_arguments)]
    pub fn from_csr(
        d_sae: usize,
        row_ptr: Vec<u64>,
        col_idx: Vec<u32>,
        values: Vec<f32>,
        n_triples: usize,
        thresholds: GateThresholds,
        gate_support: Vec<u64>,
        input_layer_tag: String,
        output_layer_tag: String,
    ) -> Result<Self> {
        ensure_dims("row_ptr", d_sae + 1, row_ptr.len())?;
        ensure_dims("col_idx vs values", values.len(), col_idx.len())?;
        ensure_dims("gate_support", d_sae, gate_support.len())?;
        if row_ptr[0] != 0 || row_ptr[d_sae] as usize != values.len() {
            return Err(DspaError::MalformedHeader("row_ptr does not span the value array".into()));
        }
        for w in row_ptr.windows(2) {
            if w[1] < w[0] {
                return Err(DspaError::MalformedHeader("row_ptr is not monotone".into()));
            }
            let cols = &col_idx[w[0] as usize..w[1] as usize];
            if cols.windows(2).any(|c| c[1] <= c[0]) || cols.iter().any(|&c| c as usize >= d_sae) {
                return Err(DspaError::MalformedHeader(
                    "column indices must be strictly increasing and < d_sae".into(),
                ));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DspaError::NonFinite("map values".into()));
        }
        Ok(Self {
            d_sae,
            row_ptr,
            col_idx,
            values,
            n_triples,
            thresholds,
            gate_support,
            sparsify_tau: 0.0,
            support_floor: DEFAULT_SUPPORT_FLOOR,
            input_layer_tag,
            output_layer_tag,
        })
    }

    /// A map given directly as dense rows, for fixtures and imports. Every
    /// nonempty row is recorded with support 1 out of `N = 1`.
    pub fn from_dense(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.len();
        let mut row_ptr = vec![0u64];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut support = vec![0u64; d];
        for (i, row) in rows.iter().enumerate() {
            ensure_dims("dense map row", d, row.len())?;
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j as u32);
                    values.push(v);
                    support[i] = 1;
                }
            }
            row_ptr.push(values.len() as u64);
        }
        Self::from_csr(
            d,
            row_ptr,
            col_idx,
            values,
            1,
            GateThresholds::external(1),
            support,
            String::new(),
            String::new(),
        )
    }

    pub fn d_sae(&self) -> usize {
        self.d_sae
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u64] {
        &self.row_ptr
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
        (&self.col_idx[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&(j as u32)).map_or(0.0, |p| vals[p])
    }

    pub fn to_dense(&self) -> Vec<Vec<f32>> {
        (0..self.d_sae)
            .map(|i| {
                let mut row = vec![0.0; self.d_sae];
                let (cols, vals) = self.row(i);
                for (&j, &v) in cols.iter().zip(vals) {
                    row[j as usize] = v;
                }
                row
            })
            .collect()
    }

    /// `sum_i w_i A[i, :]` accumulated in f64, rows visited in the given order.
    pub fn combine_rows(&self, weights: &[(usize, f64)]) -> Result<Vec<f64>> {
        let mut out = vec![0.0f64; self.d_sae];
        for &(i, w) in weights {
            if i >= self.d_sae {
                return Err(DspaError::invalid(format!("row {i} out of range for d_sae = {}", self.d_sae)));
            }
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j as usize] += w * v as f64;
            }
        }
        Ok(out)
    }

    /// Column sums over stored entries.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.d_sae];
        for (&j, &v) in self.col_idx.iter().zip(&self.values) {
            sums[j as usize] += v as f64;
        }
        sums
    }

    pub fn is_sparsified(&self) -> bool {
        self.sparsify_tau > 0.0
    }

    /// Rows whose gate support is below the support floor.
    pub fn low_support_rows(&self) -> Vec<u32> {
        self.gate_support
            .iter()
            .enumerate()
            .filter(|(_, &n)| n < self.support_floor)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = MapHeader {
            n: self.n_triples,
            p: self.thresholds.percentile,
            sparsify_tau: self.sparsify_tau,
            input_layer_tag: self.input_layer_tag.clone(),
            output_layer_tag: self.output_layer_tag.clone(),
            d_sae: self.d_sae,
            nnz: self.nnz(),
            gate_support: self.gate_support.clone(),
            tau: self.thresholds.tau.clone(),
            support_floor: self.support_floor,
            low_support_rows: self.low_support_rows(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out =
            Vec::with_capacity(16 + header.len() + 8 * self.row_ptr.len() + 8 * self.values.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        self.row_ptr.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.col_idx.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != MAP_MAGIC {
            return Err(DspaError::BadMagic {
                expected: "DSPM".into(),
                found: magic.to_vec(),
            });
        }
        let version = cur.u32()?;
        if version != MAP_VERSION {
            return Err(DspaError::UnsupportedVersion(version));
        }
        let header_len = cur.u64()? as usize;
        let h: MapHeader = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| DspaError::MalformedHeader(e.to_string()))?;
        let d = h.d_sae;
        let needed = (d + 1)
            .checked_mul(8)
            .and_then(|a| h.nnz.checked_mul(8).map(|b| a + b))
            .ok_or(DspaError::UnexpectedEof)?;
        if cur.remaining() < needed {
            return Err(DspaError::UnexpectedEof);
        }
        let row_ptr = (0..=d).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        let col_idx = (0..h.nnz).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let values = (0..h.nnz)
            .map(|_| cur.u32().map(f32::from_bits))
            .collect::<Result<Vec<_>>>()?;
        if cur.remaining() != 0 {
            return Err(DspaError::MalformedHeader("trailing bytes after CSR arrays".into()));
        }
        if !h.tau.is_empty() {
            ensure_dims("tau", d, h.tau.len())?;
        }
        let mut map = Self::from_csr(
            d,
            row_ptr,
            col_idx,
            values,
            h.n,
            GateThresholds {
                tau: h.tau,
                percentile: h.p,
                fit_count: h.n,
            },
            h.gate_support,
            h.input_layer_tag,
            h.output_layer_tag,
        )?;
        map.sparsify_tau = h.sparsify_tau;
        map.support_floor = h.support_floor;
        Ok(map)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
