use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentOp;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::task::{TaskKind, TaskSpec};
use crate::train::optim::OptimizerConfig;

/// Channel widths used when no explicit `[model]` table is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Full,
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub include_background_in_jaccard: bool,
    pub model_preset: ModelPreset,
    /// Overrides `model_preset` when present.
    pub model: Option<ModelConfig>,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub k_folds: usize,
    pub fold_index: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub validate_every: usize,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Divide by the channel std in addition to subtracting the mean.
    pub normalize_std: bool,
    pub augmentation: Vec<AugmentOp>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Binary,
            include_background_in_jaccard: false,
            model_preset: ModelPreset::Full,
            model: None,
            learning_rate: 1e-4,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            epochs: 100,
            batch_size: 2,
            k_folds: 4,
            fold_index: 0,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            validate_every: 1,
            grad_clip: None,
            normalize_std: false,
            augmentation: vec![AugmentOp::HFlip { p: 0.5 }, AugmentOp::VFlip { p: 0.5 }],
        }
    }
}

impl TrainConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec { include_background_in_jaccard: self.include_background_in_jaccard, ..TaskSpec::new(self.task) }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| match self.model_preset {
            ModelPreset::Full => ModelConfig::for_task(self.task),
            ModelPreset::Compact => ModelConfig::compact(self.task),
        })
    }

    /// Copy with the model table filled in, as echoed to run manifests.
    pub fn resolved(&self) -> Self {
        Self { model: Some(self.model_config()), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate = {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".into());
        }
        if self.validate_every == 0 {
            problems.push("validate_every must be >= 1".into());
        }
        if self.k_folds >= 2 && self.fold_index >= self.k_folds {
            problems.push(format!("fold_index {} must be < k_folds {}", self.fold_index, self.k_folds));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                problems.push(format!("grad_clip = {c} must be > 0"));
            }
        }
        if self.model_config().num_classes != self.task.logit_channels() {
            problems.push(format!(
                "model num_classes {} does not match the {} task ({} channels)",
                self.model_config().num_classes,
                self.task,
                self.task.logit_channels()
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        crate::data::validate_ops(&self.augmentation)?;
        crate::model::validate_config(&self.model_config())?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override; the value is parsed as a TOML value
    /// and falls back to a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not inside a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
