use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::arch::{Arch, ArchScale, NetDescriptor};
use crate::augment::{build_preset, ArchFamily, AugmentPipeline};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::transfer::{FreezePolicy, FreezeVariant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

/// One training run. Relative paths are resolved against the directory of
/// the config file when loaded with [`ExperimentConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: Arch,
    pub batch_size: usize,
    #[serde(default)]
    pub load_weights: bool,
    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    /// Require every non-head tensor of the pretrained checkpoint to match.
    #[serde(default)]
    pub strict_load: bool,
    pub freeze: FreezePolicy,
    pub dropout_keep: f64,
    pub start_lr: f64,
    /// `None` for both means a constant learning rate.
    #[serde(default)]
    pub decay_step: Option<u64>,
    #[serde(default)]
    pub decay_rate: Option<f64>,
    pub batch_norm: bool,
    pub num_aug: u8,
    #[serde(deserialize_with = "optimizer_field")]
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub scale: ArchScale,
    pub manifest: PathBuf,
    /// Existing split CSV; derived from the seed when absent.
    #[serde(default)]
    pub split: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_test_every")]
    pub test_every: usize,
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
    #[serde(default)]
    pub rebalance_cap: Option<usize>,
    /// Channel means for mean subtraction; per-image means when absent.
    #[serde(default)]
    pub dataset_mean: Option<[f64; 3]>,
    /// Checkpoint to continue from.
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

fn default_test_every() -> usize {
    2
}

fn optimizer_field<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<OptimizerKind, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Field {
        Name(String),
        Full(OptimizerKind),
    }
    match Field::deserialize(d)? {
        Field::Name(s) => s.parse().map_err(serde::de::Error::custom),
        Field::Full(k) => Ok(k),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Load a JSON array of configs.
    pub fn load_list(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values: Vec<serde_json::Value> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        values
            .into_iter()
            .map(|v| {
                let mut cfg: ExperimentConfig = serde_json::from_value(v)?;
                cfg.resolve_paths(base);
                Ok(cfg)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        for p in [&mut self.weights_path, &mut self.split, &mut self.resume]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Checks every field before any data is touched.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.test_every == 0 {
            return Err(invalid("test_every must be at least 1"));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(invalid(format!(
                "dropout_keep {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        self.schedule().map_err(|e| invalid(e.to_string()))?;
        self.optimizer
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.scale.validate().map_err(|e| invalid(e.to_string()))?;
        self.pipeline().map_err(|e| invalid(e.to_string()))?;
        if self.load_weights && self.weights_path.is_none() {
            return Err(invalid("load_weights is set but weights_path is missing"));
        }
        if let Some(es) = self.early_stopping {
            if es.patience == 0 || es.min_delta < 0.0 || es.min_delta.is_nan() {
                return Err(invalid(
                    "early stopping needs patience >= 1 and min_delta >= 0",
                ));
            }
        }
        if self.rebalance_cap == Some(0) {
            return Err(invalid("rebalance_cap must be at least 1"));
        }
        if let Some(m) = self.dataset_mean {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid("dataset_mean must be finite"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        match (self.decay_step, self.decay_rate) {
            (Some(step), Some(rate)) => LrSchedule::new(self.start_lr, step, rate),
            (None, None) => LrSchedule::constant(self.start_lr),
            _ => Err(Error::arg(
                "decay_step and decay_rate must be given together",
            )),
        }
    }

    /// The augmentation preset, resized to the network's input side.
    pub fn pipeline(&self) -> Result<AugmentPipeline> {
        let p = build_preset(self.num_aug, ArchFamily::of(self.network))?
            .with_side(self.scale.input_side);
        Ok(match self.dataset_mean {
            Some(m) => p.with_dataset_mean(m),
            None => p,
        })
    }

    pub fn descriptor(&self, n_classes: usize) -> NetDescriptor {
        let mut d = NetDescriptor::new(self.network, self.scale, n_classes);
        d.batch_norm = self.batch_norm;
        d.keep_prob = self.dropout_keep;
        d
    }

    /// The experiment table's `Frozen layers` and `Train layers` cells.
    pub fn freeze_columns(&self) -> (&'static str, &'static str) {
        if self.freeze.trainable_prefixes.is_some() {
            return ("Yes", "Custom");
        }
        match self.freeze.variant {
            FreezeVariant::AllLayers => ("Yes", "All layers"),
            FreezeVariant::HalfLayers => ("Yes", "Half layers"),
            FreezeVariant::LastLayer => ("Yes", "Last layer"),
            FreezeVariant::NoneFrozen => ("No", "All layers"),
        }
    }
}
