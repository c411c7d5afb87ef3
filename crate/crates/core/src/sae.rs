//! Sparse autoencoder runtime: parameter loading, encode, decode.
//!
//! Weights are stored row-major in `f32`; every dot product accumulates in
//! `f64` and is rounded once at the end.

use std::path::Path;

use serde_json::Value;

use crate::container::{Container, Tensor};
use crate::error::{ensure_dims, ensure_finite, DspaError, Result};

/// Sparsifying nonlinearity applied to the encoder pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Relu,
    /// Passes a pre-activation only when it strictly exceeds its threshold.
    JumpRelu { theta: Vec<f32> },
    /// Keeps the `k` largest post-ReLU values of each row (per token).
    BatchTopK { k: usize },
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::JumpRelu { .. } => "jumprelu",
            Activation::BatchTopK { .. } => "batchtopk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    d_model: usize,
    d_sae: usize,
    /// `d_sae x d_model`
    w_enc: Vec<f32>,
    b_enc: Vec<f32>,
    /// `d_model x d_sae`
    w_dec: Vec<f32>,
    b_dec: Vec<f32>,
    activation: Activation,
}

/// Non-negative SAE code for one hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f32 {
        self.0.iter().copied().fold(0.0, f32::max)
    }

    /// Indices of strictly positive entries.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i)
    }
}

impl SaeParams {
    pub fn new(
        d_model: usize,
        d_sae: usize,
        w_enc: Vec<f32>,
        b_enc: Vec<f32>,
        w_dec: Vec<f32>,
        b_dec: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if d_model == 0 || d_sae == 0 {
            return Err(DspaError::invalid("d_model and d_sae must be positive"));
        }
        ensure_dims("W_enc", d_sae * d_model, w_enc.len())?;
        ensure_dims("b_enc", d_sae, b_enc.len())?;
        ensure_dims("W_dec", d_model * d_sae, w_dec.len())?;
        ensure_dims("b_dec", d_model, b_dec.len())?;
        ensure_finite("W_enc", &w_enc)?;
        ensure_finite("b_enc", &b_enc)?;
        ensure_finite("W_dec", &w_dec)?;
        ensure_finite("b_dec", &b_dec)?;
        match &activation {
            Activation::Relu => {}
            Activation::JumpRelu { theta } => {
                ensure_dims("theta", d_sae, theta.len())?;
                ensure_finite("theta", theta)?;
                if theta.iter().any(|&t| t < 0.0) {
                    return Err(DspaError::invalid("JumpReLU thresholds must be non-negative"));
                }
            }
            Activation::BatchTopK { k } => {
                if *k == 0 || *k > d_sae {
                    return Err(DspaError::invalid(format!(
                        "BatchTopK k = {k} must be in 1..={d_sae}"
                    )));
                }
            }
        }
        Ok(Self {
            d_model,
            d_sae,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            activation,
        })
    }

    /// Square SAE with identity encoder and decoder and zero biases.
    pub fn identity(d: usize, activation: Activation) -> Result<Self> {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        Self::new(d, d, eye.clone(), vec![0.0; d], eye, vec![0.0; d], activation)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_sae(&self) -> usize {
        self.d_sae
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn w_enc(&self) -> &[f32] {
        &self.w_enc
    }

    pub fn w_dec(&self) -> &[f32] {
        &self.w_dec
    }

    /// Encoder pre-activations `W_enc h + b_enc`.
    pub fn pre_activations(&self, h: &[f32]) -> Result<Vec<f32>> {
        ensure_dims("hidden state", self.d_model, h.len())?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(DspaError::invalid("hidden state contains non-finite values"));
        }
        Ok(self
            .w_enc
            .chunks_exact(self.d_model)
            .zip(&self.b_enc)
            .map(|(row, &b)| (dot(row, h) + b as f64) as f32)
            .collect())
    }

    pub fn encode(&self, h: &[f32]) -> Result<LatentVector> {
        let mut z = self.pre_activations(h)?;
        match &self.activation {
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::JumpRelu { theta } => {
                for (v, &t) in z.iter_mut().zip(theta) {
                    if *v <= t {
                        *v = 0.0;
                    }
                }
            }
            Activation::BatchTopK { k } => {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
                let keep = crate::select::top_k(&z, *k);
                let mut out = vec![0.0; z.len()];
                for i in keep {
                    out[i] = z[i];
                }
                z = out;
            }
        }
        // max(0.0) maps -0.0 to -0.0 on some paths; normalise so the code is
        // bitwise non-negative.
        z.iter_mut().filter(|v| **v == 0.0).for_each(|v| *v = 0.0);
        Ok(LatentVector(z))
    }

    /// `W_dec f + b_dec`.
    pub fn decode(&self, f: &LatentVector) -> Result<Vec<f32>> {
        ensure_dims("latent vector", self.d_sae, f.len())?;
        Ok(self
            .decode_acc(f.values())
            .into_iter()
            .zip(&self.b_dec)
            .map(|(acc, &b)| (acc + b as f64) as f32)
            .collect())
    }

    /// `W_dec delta` with no bias term. `decode_delta(0) == 0` exactly.
    pub fn decode_delta(&self, delta: &[f32]) -> Result<Vec<f32>> {
        ensure_dims("latent delta", self.d_sae, delta.len())?;
        Ok(self.decode_acc(delta).into_iter().map(|a| a as f32).collect())
    }

    /// Sparse decoder product over the nonzero entries of `f`, in f64.
    /// Skipping zero terms leaves every accumulator bit-identical to the dense
    /// sum since the accumulators start at +0.0.
    fn decode_acc(&self, f: &[f32]) -> Vec<f64> {
        let nz: Vec<(usize, f64)> = f
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, &v)| (j, v as f64))
            .collect();
        self.w_dec
            .chunks_exact(self.d_sae)
            .map(|row| nz.iter().map(|&(j, v)| row[j] as f64 * v).sum())
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let m = &mut c.metadata;
        m.insert("kind".into(), Value::from("sae"));
        m.insert("activation".into(), Value::from(self.activation.name()));
        m.insert("d_model".into(), Value::from(self.d_model));
        m.insert("d_sae".into(), Value::from(self.d_sae));
        if let Activation::BatchTopK { k } = self.activation {
            m.insert("k".into(), Value::from(k));
        }
        c.insert("W_enc", Tensor::new(vec![self.d_sae, self.d_model], self.w_enc.clone()));
        c.insert("b_enc", Tensor::new(vec![self.d_sae], self.b_enc.clone()));
        c.insert("W_dec", Tensor::new(vec![self.d_model, self.d_sae], self.w_dec.clone()));
        c.insert("b_dec", Tensor::new(vec![self.d_model], self.b_dec.clone()));
        if let Activation::JumpRelu { theta } = &self.activation {
            c.insert("theta", Tensor::new(vec![self.d_sae], theta.clone()));
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let d_model = c.meta_usize("d_model")?;
        let d_sae = c.meta_usize("d_sae")?;
        let activation = match c.meta_str("activation")? {
            "relu" => Activation::Relu,
            "jumprelu" => Activation::JumpRelu {
                theta: take_shaped(&mut c, "theta", &[d_sae])?,
            },
            "batchtopk" => Activation::BatchTopK { k: c.meta_usize("k")? },
            other => {
                return Err(DspaError::MalformedHeader(format!(
                    "unknown activation rule {other:?}"
                )))
            }
        };
        let w_enc = take_shaped(&mut c, "W_enc", &[d_sae, d_model])?;
        let b_enc = take_shaped(&mut c, "b_enc", &[d_sae])?;
        let w_dec = take_shaped(&mut c, "W_dec", &[d_model, d_sae])?;
        let b_dec = take_shaped(&mut c, "b_dec", &[d_model])?;
        Self::new(d_model, d_sae, w_enc, b_enc, w_dec, b_dec, activation)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }
}

fn take_shaped(c: &mut Container, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let t = c.take(name)?;
    if t.shape.len() != shape.len() {
        return Err(DspaError::dims(format!("{name} rank"), shape.len(), t.shape.len()));
    }
    for (axis, (&want, &got)) in shape.iter().zip(&t.shape).enumerate() {
        ensure_dims(&format!("{name} axis {axis}"), want, got)?;
    }
    Ok(t.data)
}

/// f64 dot product over eight fixed lanes, reduced in a fixed order.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        lanes[l] += x as f64 * y as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
}
