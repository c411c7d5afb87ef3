//! Optional JSON config file. Values resolve as flag, then file, then
//! built-in default.
//!
//! The file holds one object per subcommand:
//!
//! ```json
//! { "build_map": { "percentile": 80 }, "steer": { "alpha": 0.1 } }
//! ```
//!
//! `dspa flops` also accepts a bare cost config at the top level.

use std::path::Path;

use dspa_core::DspaError;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub const SECTIONS: &[&str] = &["build_map", "sparsify", "steer", "audit", "evidence", "theory", "flops"];

/// Fills unset fields of `self` from a lower-precedence source.
pub trait Layered: Sized {
    fn layer(self, lower: Self) -> Self;
}

#[macro_export]
macro_rules! layered {
    ($t:ty { $($f:ident),+ $(,)? }) => {
        impl $crate::config::Layered for $t {
            fn layer(mut self, lower: Self) -> Self {
                $(
                    if self.$f.is_none() {
                        self.$f = lower.$f;
                    }
                )+
                self
            }
        }
    };
}

#[derive(Debug, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, DspaError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DspaError::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        match serde_json::from_str::<Value>(&text)? {
            Value::Object(root) => Ok(Self { root }),
            _ => Err(DspaError::invalid("config file must hold a JSON object")),
        }
    }

    fn is_sectioned(&self) -> bool {
        self.root.keys().all(|k| SECTIONS.contains(&k.as_str()))
    }

    /// The named section, or defaults when absent.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T, DspaError> {
        if !self.is_sectioned() {
            let unknown: Vec<&String> = self.root.keys().filter(|k| !SECTIONS.contains(&k.as_str())).collect();
            return Err(DspaError::invalid(format!(
                "unknown config section(s) {unknown:?}; expected any of {SECTIONS:?}"
            )));
        }
        match self.root.get(name) {
            Some(v) => Ok(serde_json::from_value(v.clone())?),
            None => Ok(T::default()),
        }
    }

    /// The `flops` section, or the whole file when it is a bare cost config.
    pub fn flops_section<T: DeserializeOwned + Default>(&self) -> Result<T, DspaError> {
        if self.is_sectioned() {
            self.section("flops")
        } else {
            Ok(serde_json::from_value(Value::Object(self.root.clone()))?)
        }
    }
}

pub fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, DspaError> {
    v.clone().ok_or_else(|| DspaError::invalid(format!("missing required --{flag}")))
}
