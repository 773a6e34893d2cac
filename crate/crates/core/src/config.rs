//! Hyperparameters for the model, sliding attention, thresholds and optimizer.
//!
//! A config file is a flat JSON object mapping key to number. Every key is
//! optional; missing keys take the defaults below, unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ChainRole;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub d_model: usize,
    pub dim_ff: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub n_blocks: usize,
    pub min_bw: f64,
    pub max_bw: f64,
    /// Bandwidth divisor applied to the reference valid length.
    pub scale: f64,
    pub sliding_step: usize,
    /// Weight of the Ab-H slid antigen embeddings when combining with Ab-L.
    pub alpha: f64,
    pub epsilon: f64,
    pub threshold_h: f64,
    pub threshold_l: f64,
    pub threshold_ag: f64,
    /// Epitope threshold used when both antibody chains are absent.
    pub threshold_pan: f64,
    /// Width of the encoded inputs: 640 for external embeddings, 651 for one-hot context.
    pub input_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 disables the cap.
    pub steps: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d_model: 640,
            dim_ff: 1280,
            n_heads: 10,
            conv_kernel: 5,
            n_blocks: 6,
            min_bw: 48.0,
            max_bw: 144.0,
            scale: 3.0,
            sliding_step: 3,
            alpha: 0.5,
            epsilon: 1e-9,
            threshold_h: 0.2,
            threshold_l: 0.13,
            threshold_ag: 0.3,
            threshold_pan: 0.11,
            input_dim: 640,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            ema_decay: 0.999,
            batch_size: 6,
            epochs: 50,
            steps: 0,
        }
    }
}

const INTEGER_KEYS: &[&str] = &[
    "d_model",
    "dim_ff",
    "n_heads",
    "conv_kernel",
    "n_blocks",
    "sliding_step",
    "input_dim",
    "batch_size",
    "epochs",
    "steps",
];

/// Width of one-hot context features.
pub const ONE_HOT_DIM: usize = 651;
/// Width of the external per-residue embeddings.
pub const EMBEDDING_DIM: usize = 640;

impl Config {
    /// Reads a config file; see [`Config::from_json_str`].
    pub fn from_path(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_json_str(&text)
    }

    /// Parses a flat JSON object of overrides on top of the defaults.
    /// An empty (or whitespace-only) document yields the defaults.
    pub fn from_json_str(text: &str) -> Result<Config> {
        if text.trim().is_empty() {
            return Ok(Config::default());
        }
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("malformed document: {e}")))?;
        let Value::Object(overrides) = value else {
            return Err(Error::Config("document must be a JSON object".into()));
        };
        Config::default().with_overrides(&overrides)
    }

    /// Applies `key -> number` overrides and validates the result.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Config> {
        let Value::Object(mut base) = serde_json::to_value(self)? else {
            unreachable!("Config serializes to an object")
        };
        for (key, value) in overrides {
            if !base.contains_key(key) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
            let Some(number) = value.as_f64() else {
                return Err(Error::Config(format!("{key} must be a number")));
            };
            let normalized = if INTEGER_KEYS.contains(&key.as_str()) {
                if number < 0.0 || number.fract() != 0.0 || !number.is_finite() {
                    return Err(Error::Config(format!(
                        "{key} must be a non-negative integer"
                    )));
                }
                Value::from(number as u64)
            } else {
                if !number.is_finite() {
                    return Err(Error::Config(format!("{key} must be finite")));
                }
                Value::from(number)
            };
            base.insert(key.clone(), normalized);
        }
        let config: Config = serde_json::from_value(Value::Object(base))
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.dim_ff == 0 {
            return fail("dim_ff must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail("conv_kernel must be odd".into());
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if !(self.min_bw > 0.0 && self.min_bw <= self.max_bw) {
            return fail("min_bw/max_bw must satisfy 0 < min_bw <= max_bw".into());
        }
        if self.scale <= 0.0 {
            return fail("scale must be positive".into());
        }
        if self.sliding_step == 0 {
            return fail("sliding_step must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha out of [0,1]".into());
        }
        if self.epsilon <= 0.0 {
            return fail("epsilon must be positive".into());
        }
        for (key, t) in [
            ("threshold_h", self.threshold_h),
            ("threshold_l", self.threshold_l),
            ("threshold_ag", self.threshold_ag),
            ("threshold_pan", self.threshold_pan),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return fail(format!("{key} out of [0,1]"));
            }
        }
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive".into());
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{key} out of [0,1)"));
            }
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.clip_norm <= 0.0 {
            return fail("clip_norm must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("ema_decay out of [0,1]".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn threshold(&self, role: ChainRole) -> f64 {
        match role {
            ChainRole::AbH => self.threshold_h,
            ChainRole::AbL => self.threshold_l,
            ChainRole::Ag => self.threshold_ag,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("Config serializes")
    }

    /// Hash of the keys that determine the parameter layout.
    pub fn shape_hash(&self) -> String {
        let shape = format!(
            "d_model={};dim_ff={};n_heads={};conv_kernel={};n_blocks={};input_dim={}",
            self.d_model,
            self.dim_ff,
            self.n_heads,
            self.conv_kernel,
            self.n_blocks,
            self.input_dim
        );
        let digest = Sha256::digest(shape.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// All keys with their current values, sorted by key.
    pub fn entries(&self) -> Vec<(String, Value)> {
        match serde_json::to_value(self).expect("Config serializes") {
            Value::Object(map) => map.into_iter().collect(),
            _ => unreachable!(),
        }
    }
}
