//! Run configuration: every hyperparameter, shape, path and seed in one
//! validated, immutable value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvLossForm {
    #[serde(rename = "least-squares")]
    LeastSquares,
    #[serde(rename = "vanilla-log")]
    VanillaLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub downsample_ratio: usize,
    pub latent_channels: usize,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub adv_loss_form: AdvLossForm,

    pub lr0: f64,
    pub epochs_total: u64,
    pub epochs_constant: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub buffer_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many optimizer steps; 0 means run all epochs.
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub flip_augment: bool,

    /// Stem width of the encoders/decoders; doubles at each downsampling.
    pub gen_base_width: usize,
    /// Residual blocks per encoder-decoder path, split evenly between the two.
    pub n_res_blocks: usize,
    pub disc_base_width: usize,
    /// Stride-2 layers in each patch discriminator.
    pub disc_layers: usize,
    pub seg_depth: usize,
    pub seg_base_width: usize,
    pub seg_steps: u64,
    pub seg_lr: f64,
    pub seg_batch_size: usize,
    pub extractor_dim: usize,
    pub extractor_steps: u64,

    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            image_size: 64,
            downsample_ratio: 4,
            latent_channels: 64,
            lambda1: 0.5,
            lambda2: 10.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 0.5,
            adv_loss_form: AdvLossForm::LeastSquares,
            lr0: 2e-4,
            epochs_total: 1000,
            epochs_constant: 700,
            batch_size: 1,
            seed: 0,
            buffer_size: 50,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 0,
            checkpoint_every: 100,
            flip_augment: true,
            gen_base_width: 16,
            n_res_blocks: 6,
            disc_base_width: 16,
            disc_layers: 3,
            seg_depth: 4,
            seg_base_width: 16,
            seg_steps: 200,
            seg_lr: 2e-3,
            seg_batch_size: 4,
            extractor_dim: 64,
            extractor_steps: 150,
            dataset_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn invalid(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Validation {
        field,
        msg: msg.into(),
    }
}

impl RunConfig {
    /// The `(lambda1, ..., lambda5)` loss weights.
    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    /// Number of stride-2 stages in the encoders (`log2(downsample_ratio)`).
    pub fn n_downsamplings(&self) -> usize {
        self.downsample_ratio.trailing_zeros() as usize
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 {
            return Err(invalid("image_channels", "must be positive"));
        }
        if self.image_size == 0 {
            return Err(invalid("image_size", "must be positive"));
        }
        if self.downsample_ratio == 0 || !self.downsample_ratio.is_power_of_two() {
            return Err(invalid(
                "downsample_ratio",
                format!("must be a positive power of two, got {}", self.downsample_ratio),
            ));
        }
        if self.image_size % self.downsample_ratio != 0 {
            return Err(invalid(
                "image_size",
                format!(
                    "image_size not divisible by r ({} mod {} = {})",
                    self.image_size,
                    self.downsample_ratio,
                    self.image_size % self.downsample_ratio
                ),
            ));
        }
        if self.image_size % 4 != 0 {
            return Err(invalid("image_size", "image_size not divisible by 4"));
        }
        if self.latent_channels == 0 || self.latent_channels % 4 != 0 {
            return Err(invalid(
                "latent_channels",
                format!("must be a positive multiple of 4, got {}", self.latent_channels),
            ));
        }
        let lambdas: [(&'static str, f64); 5] = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be a non-negative real, got {v}")));
            }
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(invalid("lr0", "must be positive"));
        }
        if self.epochs_constant > self.epochs_total {
            return Err(invalid(
                "epochs_constant",
                format!(
                    "epochs_constant ({}) exceeds epochs_total ({})",
                    self.epochs_constant, self.epochs_total
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(invalid("adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("adam_beta2", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(invalid("adam_eps", "must be positive"));
        }
        if self.gen_base_width == 0 {
            return Err(invalid("gen_base_width", "must be positive"));
        }
        if self.disc_base_width == 0 {
            return Err(invalid("disc_base_width", "must be positive"));
        }
        if self.disc_layers == 0 {
            return Err(invalid("disc_layers", "must be positive"));
        }
        // Two stride-1 4x4 convolutions follow the stride-2 stack.
        let disc_in = self.image_size >> self.disc_layers;
        if disc_in < 3 {
            return Err(invalid(
                "disc_layers",
                format!(
                    "{} stride-2 layers leave {}px, the patch head needs at least 3",
                    self.disc_layers, disc_in
                ),
            ));
        }
        if self.seg_depth == 0 || self.image_size % (1 << (self.seg_depth - 1)) != 0 {
            return Err(invalid(
                "seg_depth",
                "image_size must be divisible by 2^(seg_depth - 1)",
            ));
        }
        if self.seg_base_width == 0 {
            return Err(invalid("seg_base_width", "must be positive"));
        }
        if !(self.seg_lr > 0.0) {
            return Err(invalid("seg_lr", "must be positive"));
        }
        if self.seg_batch_size == 0 {
            return Err(invalid("seg_batch_size", "must be positive"));
        }
        if self.extractor_dim == 0 {
            return Err(invalid("extractor_dim", "must be positive"));
        }
        Ok(())
    }

    /// Parses config text, filling defaults and validating invariants.
    /// Empty (or whitespace-only) text yields the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(text, &Map::new())
    }

    /// Like [`RunConfig::from_text`], with `overrides` taking precedence over
    /// keys present in the text.
    pub fn from_text_with(text: &str, overrides: &Map<String, Value>) -> Result<Self> {
        let mut obj = if text.trim().is_empty() {
            Map::new()
        } else {
            match serde_json::from_str::<Value>(text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => {
                    return Err(Error::ConfigParse {
                        line: 1,
                        column: 1,
                        msg: "top level must be an object of key-value pairs".into(),
                    })
                }
                Err(e) => {
                    return Err(Error::ConfigParse {
                        line: e.line(),
                        column: e.column(),
                        msg: e.to_string(),
                    })
                }
            }
        };
        for (k, v) in overrides {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(obj)).map_err(|e| {
            // Field-level errors have no position once the text is a Value;
            // recover it by re-parsing the original text.
            let pos = serde_json::from_str::<RunConfig>(if text.trim().is_empty() {
                "{}"
            } else {
                text
            })
            .err()
            .map(|e| (e.line(), e.column()))
            .unwrap_or((0, 0));
            Error::ConfigParse {
                line: pos.0,
                column: pos.1,
                msg: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    load_config_with(Some(path), &Map::new())
}

/// Precedence: `overrides` > file > defaults.
pub fn load_config_with(path: Option<&Path>, overrides: &Map<String, Value>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    RunConfig::from_text_with(&text, overrides)
}
