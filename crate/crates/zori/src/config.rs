//! Run configuration: JSON file, `key=value` overrides, validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zori_core::eval::Protocol;
use zori_core::synth::SynthConfig;
use zori_core::{cachebank, dec, ensemble, kma, pipeline};

use crate::error::{Result, ZoriError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda: f64,
    pub k_channels: usize,
    pub alpha: f64,
    #[serde(rename = "cache_K")]
    pub cache_k: usize,
    pub n_trainable: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_seen: f64,
    pub beta_unseen: f64,
    pub temperature: f64,
    pub protocol: Protocol,
    /// Built-in dataset name or path to a split JSON file.
    pub split: Option<String>,
    /// Worker threads for `predict`; 0 picks the number of cores.
    pub workers: usize,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda: dec::DEFAULT_LAMBDA,
            k_channels: dec::DEFAULT_K,
            alpha: cachebank::DEFAULT_ALPHA,
            cache_k: cachebank::DEFAULT_CACHE_K,
            n_trainable: kma::DEFAULT_TRAINABLE,
            t: kma::DEFAULT_INSTANCES_PER_CLASS,
            beta_seen: ensemble::DEFAULT_BETA_SEEN,
            beta_unseen: ensemble::DEFAULT_BETA_UNSEEN,
            temperature: pipeline::DEFAULT_TEMPERATURE,
            protocol: Protocol::Gzsri,
            split: None,
            workers: 0,
            synth: SynthConfig::default(),
        }
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ZoriError::config(field, format!("{v} is outside [0, 1]")))
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(ZoriError::config(field, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        unit_interval("lambda", self.lambda)?;
        unit_interval("beta_seen", self.beta_seen)?;
        unit_interval("beta_unseen", self.beta_unseen)?;
        positive("k_channels", self.k_channels)?;
        positive("cache_K", self.cache_k)?;
        positive("n_trainable", self.n_trainable)?;
        positive("T", self.t)?;
        if !self.alpha.is_finite() {
            return Err(ZoriError::config("alpha", "must be finite"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ZoriError::config("temperature", "must be positive and finite"));
        }
        self.synth.validate().map_err(|e| ZoriError::config("synth", e.to_string()))
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_error(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then each `key=value` override in
    /// order. Keys are dotted paths (`synth.seed`); values parse as JSON
    /// and fall back to plain strings.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ZoriError::io(p, e))?;
                let file_value: Value = serde_json::from_str(&text).map_err(|e| ZoriError::json(p, e))?;
                // validate the file on its own so errors point at it
                let cfg: Self = serde_path_error(file_value).map_err(|e| match e {
                    ZoriError::Config { field, reason } => ZoriError::config(field, format!("{reason} (in {})", p.display())),
                    other => other,
                })?;
                serde_json::to_value(cfg).expect("config serializes")
            }
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ZoriError::Usage(format!("override `{o}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), parsed)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ZoriError::config(parts[..i].join("."), "is not an object"))?;
        if !obj.contains_key(*part) {
            return Err(ZoriError::config(parts[..=i].join("."), "unknown field"));
        }
        let slot = obj.get_mut(*part).expect("checked above");
        if i + 1 == parts.len() {
            *slot = new;
            return Ok(());
        }
        cur = slot;
    }
    Err(ZoriError::config(key, "empty key"))
}

/// Deserializes and reports the failing field as a dotted path.
fn serde_path_error(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // unknown keys are reported at their parent; name the key itself
        let field = match inner.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
            Some(key) if path == "." => key.to_string(),
            Some(key) => format!("{path}.{key}"),
            None => path,
        };
        ZoriError::config(field, inner)
    })
}
