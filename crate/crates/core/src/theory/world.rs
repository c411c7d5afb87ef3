//! Synthetic worlds: `delta_rho = c * Sigma * B * g + noise` with `g` drawn
//! from a gate law.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::GateVector;
use crate::error::{DspaError, Result};

const PSD_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub seed: u64,
    #[serde(default = "one")]
    pub scale: f64,
}

/// Matrix shorthand accepted in world files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    /// `"identity"` or `"zero"`.
    Named(String),
    Diag { diag: Vec<f64> },
    Dense { dense: Vec<Vec<f64>> },
    /// Gaussian entries times `scale`; for Sigma, `G G^T / d`.
    Random { random: RandomSpec },
    Rows(Vec<Vec<f64>>),
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::Named("identity".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub weight: f64,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLawSpec {
    Bernoulli(Vec<f64>),
    BernoulliUniform(f64),
    /// Explicit joint law over gate patterns; weights are normalised.
    Patterns(Vec<PatternSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub d: usize,
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default)]
    pub sigma: MatrixSpec,
    #[serde(default)]
    pub b: MatrixSpec,
    pub gate_law: GateLawSpec,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub clip: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateLaw {
    Bernoulli(Vec<f64>),
    Patterns { weights: Vec<f64>, active: Vec<Vec<usize>> },
}

impl GateLaw {
    fn from_spec(spec: &GateLawSpec, d: usize) -> Result<Self> {
        match spec {
            GateLawSpec::Bernoulli(p) => {
                if p.len() != d {
                    return Err(DspaError::dims("bernoulli probabilities", d, p.len()));
                }
                if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(DspaError::invalid(format!("gate probability {bad} outside [0, 1]")));
                }
                Ok(GateLaw::Bernoulli(p.clone()))
            }
            GateLawSpec::BernoulliUniform(p) => GateLaw::from_spec(&GateLawSpec::Bernoulli(vec![*p; d]), d),
            GateLawSpec::Patterns(pats) => {
                if pats.is_empty() {
                    return Err(DspaError::Empty("gate pattern list"));
                }
                let total: f64 = pats.iter().map(|p| p.weight).sum();
                if pats.iter().any(|p| !(p.weight >= 0.0 && p.weight.is_finite())) || total <= 0.0 {
                    return Err(DspaError::invalid("pattern weights must be finite, >= 0 and not all zero"));
                }
                let mut active = Vec::with_capacity(pats.len());
                for p in pats {
                    let mut a = p.active.clone();
                    a.sort_unstable();
                    a.dedup();
                    if let Some(&bad) = a.iter().find(|&&i| i >= d) {
                        return Err(DspaError::invalid(format!("pattern feature {bad} out of range for d = {d}")));
                    }
                    active.push(a);
                }
                Ok(GateLaw::Patterns {
                    weights: pats.iter().map(|p| p.weight / total).collect(),
                    active,
                })
            }
        }
    }
}

fn build_matrix(spec: &MatrixSpec, d: usize, what: &str, covariance: bool) -> Result<DMatrix<f64>> {
    let from_rows = |rows: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(DspaError::invalid(format!("{what} must be {d} x {d}")));
        }
        Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    };
    let m = match spec {
        MatrixSpec::Named(name) => match name.as_str() {
            "identity" => DMatrix::identity(d, d),
            "zero" => DMatrix::zeros(d, d),
            other => return Err(DspaError::invalid(format!("unknown {what} shorthand {other:?}"))),
        },
        MatrixSpec::Diag { diag } => {
            if diag.len() != d {
                return Err(DspaError::dims(format!("{what} diagonal"), d, diag.len()));
            }
            DMatrix::from_diagonal(&DVector::from_column_slice(diag))
        }
        MatrixSpec::Dense { dense } | MatrixSpec::Rows(dense) => from_rows(dense)?,
        MatrixSpec::Random { random } => {
            let mut rng = ChaCha8Rng::seed_from_u64(random.seed);
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * random.scale);
            if covariance {
                &g * g.transpose() / d as f64
            } else {
                g
            }
        }
    };
    if m.iter().any(|x| !x.is_finite()) {
        return Err(DspaError::NonFinite(what.to_string()));
    }
    Ok(m)
}

/// Symmetrises and floors negative eigenvalues at zero. Returns whether the
/// matrix changed.
pub fn project_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let mut changed = sym != *m;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|&l| l < PSD_FLOOR) {
        changed = true;
        let floored = eig.eigenvalues.map(|l| l.max(0.0));
        let v = &eig.eigenvectors;
        return (v * DMatrix::from_diagonal(&floored) * v.transpose(), changed);
    }
    (sym, changed)
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub d: usize,
    pub c: f64,
    pub sigma: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub gate_law: GateLaw,
    pub noise_scale: f64,
    pub clip: bool,
    /// Sigma was symmetrised or eigenvalue-floored on load.
    pub sigma_projected: bool,
    /// `c * Sigma * B`; column `i` is the shift contributed by gate `i`.
    shift: DMatrix<f64>,
}

impl SyntheticWorld {
    pub fn new(
        c: f64,
        sigma: DMatrix<f64>,
        b: DMatrix<f64>,
        gate_law: GateLaw,
        noise_scale: f64,
        clip: bool,
    ) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d || b.nrows() != d || b.ncols() != d {
            return Err(DspaError::invalid(format!(
                "Sigma ({}x{}) and B ({}x{}) must be square with equal size",
                sigma.nrows(),
                sigma.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(DspaError::invalid(format!("c = {c} must be positive")));
        }
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(DspaError::invalid(format!("noise_scale = {noise_scale} must be >= 0")));
        }
        let law_d = match &gate_law {
            GateLaw::Bernoulli(p) => p.len(),
            GateLaw::Patterns { active, .. } => {
                if active.iter().flatten().any(|&i| i >= d) {
                    return Err(DspaError::invalid("gate pattern index out of range"));
                }
                d
            }
        };
        if law_d != d {
            return Err(DspaError::dims("gate law", d, law_d));
        }
        let (sigma, sigma_projected) = project_psd(&sigma);
        let shift = &sigma * &b * c;
        Ok(Self {
            d,
            c,
            sigma,
            b,
            gate_law,
            noise_scale,
            clip,
            sigma_projected,
            shift,
        })
    }

    pub fn from_spec(spec: &WorldSpec) -> Result<Self> {
        if spec.d == 0 {
            return Err(DspaError::invalid("world dimension must be positive"));
        }
        let sigma = build_matrix(&spec.sigma, spec.d, "Sigma", true)?;
        let b = build_matrix(&spec.b, spec.d, "B", false)?;
        let law = GateLaw::from_spec(&spec.gate_law, spec.d)?;
        Self::new(spec.c, sigma, b, law, spec.noise_scale, spec.clip)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DspaError::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    /// `c * Sigma * B`.
    pub fn shift(&self) -> &DMatrix<f64> {
        &self.shift
    }

    /// `P(g_i = 1)`.
    pub fn marginals(&self) -> Vec<f64> {
        match &self.gate_law {
            GateLaw::Bernoulli(p) => p.clone(),
            GateLaw::Patterns { weights, active } => {
                let mut p = vec![0.0; self.d];
                for (w, a) in weights.iter().zip(active) {
                    for &i in a {
                        p[i] += w;
                    }
                }
                p
            }
        }
    }

    /// Closed-form `M = E[g g^T]`.
    pub fn gram(&self) -> DMatrix<f64> {
        match &self.gate_law {
            GateLaw::Bernoulli(p) => DMatrix::from_fn(self.d, self.d, |i, j| if i == j { p[i] } else { p[i] * p[j] }),
            GateLaw::Patterns { weights, active } => {
                let mut m = DMatrix::zeros(self.d, self.d);
                for (w, a) in weights.iter().zip(active) {
                    for &i in a {
                        for &j in a {
                            m[(i, j)] += w;
                        }
                    }
                }
                m
            }
        }
    }

    /// `pi_{i'|i} = P(g_i' = 1 | g_i = 1)`, with `pi_{i|i} = 1`.
    pub fn coactivation(&self, i: usize) -> Result<Vec<f64>> {
        self.check_gate(i)?;
        let m = self.gram();
        let p = m[(i, i)];
        if p <= 0.0 {
            return Err(DspaError::invalid(format!("gate {i} has zero probability")));
        }
        let mut pi: Vec<f64> = (0..self.d).map(|j| m[(i, j)] / p).collect();
        pi[i] = 1.0;
        Ok(pi)
    }

    /// Expected target `c * Sigma * B * M`, i.e. the transpose of the
    /// population map.
    pub fn factorization_target(&self) -> DMatrix<f64> {
        &self.shift * self.gram()
    }

    /// `E[delta_rho | g_i = 1]` without clipping.
    pub fn conditional_mean(&self, i: usize) -> Result<Vec<f64>> {
        let pi = self.coactivation(i)?;
        Ok((&self.shift * DVector::from_vec(pi)).iter().copied().collect())
    }

    pub(crate) fn check_gate(&self, i: usize) -> Result<()> {
        if i >= self.d {
            return Err(DspaError::invalid(format!("gate {i} out of range for d = {}", self.d)));
        }
        Ok(())
    }

    /// Active gate indices, ascending.
    pub fn sample_gates(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match &self.gate_law {
            GateLaw::Bernoulli(p) => (0..self.d).filter(|&i| rng.random::<f64>() < p[i]).collect(),
            GateLaw::Patterns { weights, active } => {
                let u: f64 = rng.random();
                pick(weights.iter().copied().zip(active), u).clone()
            }
        }
    }

    /// Gates drawn from the law conditioned on `g_i = 1`.
    pub fn sample_gates_given(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        self.check_gate(i)?;
        match &self.gate_law {
            GateLaw::Bernoulli(p) => {
                if p[i] <= 0.0 {
                    return Err(DspaError::invalid(format!("gate {i} has zero probability")));
                }
                Ok((0..self.d).filter(|&j| j == i || rng.random::<f64>() < p[j]).collect())
            }
            GateLaw::Patterns { weights, active } => {
                let total: f64 = weights.iter().zip(active).filter(|(_, a)| a.binary_search(&i).is_ok()).map(|(w, _)| w).sum();
                if total <= 0.0 {
                    return Err(DspaError::invalid(format!("gate {i} has zero probability")));
                }
                let u: f64 = rng.random::<f64>() * total;
                let eligible = weights.iter().copied().zip(active).filter(|(_, a)| a.binary_search(&i).is_ok());
                Ok(pick(eligible, u).clone())
            }
        }
    }

    /// `c * Sigma * B * g` plus noise, clipped to `[-1, 1]` in clip mode.
    pub fn sample_delta(&self, active: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for &a in active {
            for (o, s) in out.iter_mut().zip(self.shift.column(a).iter()) {
                *o += s;
            }
        }
        if self.noise_scale > 0.0 {
            for o in out.iter_mut() {
                *o += self.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if self.clip {
            for o in out.iter_mut() {
                *o = o.clamp(-1.0, 1.0);
            }
        }
        out
    }

    /// One synthetic triple, fully determined by `seed`.
    pub fn sample_triple(&self, seed: u64) -> (GateVector, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = self.sample_gates(&mut rng);
        let delta = self.sample_delta(&active, &mut rng);
        (GateVector::from_indices(self.d, &active), delta)
    }
}

fn pick<'a>(mut items: impl Iterator<Item = (f64, &'a Vec<usize>)>, u: f64) -> &'a Vec<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (w, a) in items.by_ref() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(a);
        if u < acc {
            return a;
        }
    }
    last.expect("gate law has positive total weight")
}

/// Generator for trial `t` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t);
    rng
}
