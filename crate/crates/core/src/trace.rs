//! Activation traces and preference-triple manifests.
//!
//! A trace file is a `DSPA` container holding one tensor `"hidden"` of shape
//! `[T, d_model]` and metadata fields `layer_tag`, `T` and `T_x`. Rows
//! `0..T_x` are prompt tokens, rows `T_x..T` are response tokens.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{Container, Tensor};
use crate::error::{DspaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prompt,
    Response,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    layer_tag: String,
    d_model: usize,
    prompt_len: usize,
    /// Row-major `T x d_model`.
    hidden: Vec<f32>,
}

impl ActivationTrace {
    pub fn new(
        layer_tag: impl Into<String>,
        d_model: usize,
        prompt_len: usize,
        hidden: Vec<f32>,
    ) -> Result<Self> {
        if d_model == 0 {
            return Err(DspaError::invalid("trace d_model must be positive"));
        }
        if hidden.len() % d_model != 0 {
            return Err(DspaError::dims(
                "trace hidden length (multiple of d_model)",
                (hidden.len() / d_model + 1) * d_model,
                hidden.len(),
            ));
        }
        let t = hidden.len() / d_model;
        if t == 0 {
            return Err(DspaError::invalid("trace has zero tokens"));
        }
        if prompt_len > t {
            return Err(DspaError::PromptTooLong { t_x: prompt_len, t });
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(DspaError::NonFinite("trace hidden states".into()));
        }
        Ok(Self {
            layer_tag: layer_tag.into(),
            d_model,
            prompt_len,
            hidden,
        })
    }

    /// Builds a trace from per-token rows.
    pub fn from_rows(layer_tag: impl Into<String>, prompt_len: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let d_model = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d_model) {
            return Err(DspaError::dims("trace row", d_model, bad.len()));
        }
        Self::new(layer_tag, d_model, prompt_len, rows.concat())
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn token_count(&self) -> usize {
        self.hidden.len() / self.d_model
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.token_count() - self.prompt_len
    }

    pub fn hidden(&self) -> &[f32] {
        &self.hidden
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.hidden[t * self.d_model..(t + 1) * self.d_model]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.hidden.chunks_exact(self.d_model)
    }

    pub fn segment_range(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::Prompt => 0..self.prompt_len,
            Segment::Response => self.prompt_len..self.token_count(),
        }
    }

    /// Same metadata, new hidden states (e.g. after steering).
    pub fn with_hidden(&self, hidden: Vec<f32>) -> Result<Self> {
        Self::new(self.layer_tag.clone(), self.d_model, self.prompt_len, hidden)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let m = &mut c.metadata;
        m.insert("kind".into(), Value::from("trace"));
        m.insert("layer_tag".into(), Value::from(self.layer_tag.clone()));
        m.insert("T".into(), Value::from(self.token_count()));
        m.insert("T_x".into(), Value::from(self.prompt_len));
        c.insert("hidden", Tensor::new(vec![self.token_count(), self.d_model], self.hidden.clone()));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        let layer_tag = c.meta_str("layer_tag")?.to_string();
        let t = c.meta_usize("T")?;
        let t_x = c.meta_usize("T_x")?;
        let hidden = c.take("hidden")?;
        if hidden.shape.len() != 2 {
            return Err(DspaError::dims("hidden tensor rank", 2, hidden.shape.len()));
        }
        let (rows, d_model) = (hidden.shape[0], hidden.shape[1]);
        if rows != t {
            return Err(DspaError::dims("trace token count (header T vs hidden rows)", t, rows));
        }
        if t == 0 {
            return Err(DspaError::invalid("trace has zero tokens"));
        }
        if t_x > t {
            return Err(DspaError::PromptTooLong { t_x, t });
        }
        Self::new(layer_tag, d_model, t_x, hidden.data)
    }
}

pub fn read_trace(path: &Path) -> Result<ActivationTrace> {
    ActivationTrace::from_container(Container::read(path)?)
}

pub fn write_trace(trace: &ActivationTrace, path: &Path) -> Result<()> {
    trace.to_container().write(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub triple_id: String,
    pub prompt: ActivationTrace,
    pub chosen: ActivationTrace,
    pub rejected: ActivationTrace,
}

impl PreferenceTriple {
    pub fn new(
        triple_id: impl Into<String>,
        prompt: ActivationTrace,
        chosen: ActivationTrace,
        rejected: ActivationTrace,
    ) -> Result<Self> {
        let triple_id = triple_id.into();
        validate_prompt(&triple_id, &prompt)?;
        validate_responses(&triple_id, prompt.token_count(), &chosen, &rejected)?;
        Ok(Self {
            triple_id,
            prompt,
            chosen,
            rejected,
        })
    }
}

fn inconsistent(triple_id: &str, reason: String) -> DspaError {
    DspaError::InconsistentTriple {
        triple_id: triple_id.to_string(),
        reason,
    }
}

fn validate_prompt(triple_id: &str, prompt: &ActivationTrace) -> Result<()> {
    if prompt.prompt_len() != prompt.token_count() {
        return Err(inconsistent(
            triple_id,
            format!(
                "prompt trace must be prompt-only (T_x = {} but T = {})",
                prompt.prompt_len(),
                prompt.token_count()
            ),
        ));
    }
    Ok(())
}

fn validate_responses(
    triple_id: &str,
    prompt_tokens: usize,
    chosen: &ActivationTrace,
    rejected: &ActivationTrace,
) -> Result<()> {
    if chosen.prompt_len() != rejected.prompt_len() {
        return Err(inconsistent(
            triple_id,
            format!(
                "chosen and rejected prompt lengths differ ({} vs {})",
                chosen.prompt_len(),
                rejected.prompt_len()
            ),
        ));
    }
    if chosen.prompt_len() != prompt_tokens {
        return Err(inconsistent(
            triple_id,
            format!(
                "response traces have prompt length {} but the prompt trace has {} tokens",
                chosen.prompt_len(),
                prompt_tokens
            ),
        ));
    }
    if chosen.response_len() == 0 || rejected.response_len() == 0 {
        return Err(inconsistent(triple_id, "empty response region".into()));
    }
    if chosen.layer_tag() != rejected.layer_tag() {
        return Err(inconsistent(
            triple_id,
            format!(
                "chosen/rejected layer tags differ ({:?} vs {:?})",
                chosen.layer_tag(),
                rejected.layer_tag()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub triple_id: String,
    pub prompt: PathBuf,
    pub chosen: PathBuf,
    pub rejected: PathBuf,
}

/// Preference-triple manifest: a JSON array of [`ManifestEntry`]. Relative
/// paths resolve against the manifest's directory. Traces are loaded lazily.
#[derive(Debug, Clone)]
pub struct Manifest {
    base: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = crate::container::read_file(path)?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base, entries })
    }

    pub fn from_entries(base: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            base: base.into(),
            entries,
        }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_prompt(&self, k: usize) -> Result<ActivationTrace> {
        let e = &self.entries[k];
        let prompt = read_trace(&self.resolve(&e.prompt))?;
        validate_prompt(&e.triple_id, &prompt)?;
        Ok(prompt)
    }

    pub fn load_responses(&self, k: usize, prompt_tokens: usize) -> Result<(ActivationTrace, ActivationTrace)> {
        let e = &self.entries[k];
        let chosen = read_trace(&self.resolve(&e.chosen))?;
        let rejected = read_trace(&self.resolve(&e.rejected))?;
        validate_responses(&e.triple_id, prompt_tokens, &chosen, &rejected)?;
        Ok((chosen, rejected))
    }

    pub fn load_triple(&self, k: usize) -> Result<PreferenceTriple> {
        let prompt = self.load_prompt(k)?;
        let (chosen, rejected) = self.load_responses(k, prompt.token_count())?;
        Ok(PreferenceTriple {
            triple_id: self.entries[k].triple_id.clone(),
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.entries)?)?;
        Ok(())
    }
}

/// Eagerly loads and validates every triple in manifest order.
pub fn load_triples(manifest_path: &Path) -> Result<Vec<PreferenceTriple>> {
    let m = Manifest::open(manifest_path)?;
    (0..m.len()).map(|k| m.load_triple(k)).collect()
}
