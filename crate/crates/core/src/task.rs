use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three segmentation sub-tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Parts,
    Type,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Binary, TaskKind::Parts, TaskKind::Type];

    /// Output channels of the network head. Binary uses a single logit.
    pub fn logit_channels(self) -> usize {
        match self {
            TaskKind::Binary => 1,
            TaskKind::Parts => 4,
            TaskKind::Type => 8,
        }
    }

    /// Number of label classes including background.
    pub fn label_classes(self) -> usize {
        match self {
            TaskKind::Binary => 2,
            TaskKind::Parts => 4,
            TaskKind::Type => 8,
        }
    }

    /// Directory name under `ground_truth/`.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Parts => "parts",
            TaskKind::Type => "type",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(TaskKind::Binary),
            "parts" => Ok(TaskKind::Parts),
            "type" => Ok(TaskKind::Type),
            other => Err(Error::Config(format!("unknown task `{other}` (expected binary|parts|type)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    BceLogits,
    CrossEntropy,
}

/// Task description shared by the loss, the metrics and the model head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Logit channels: 1, 4 or 8.
    pub num_classes: usize,
    pub base_loss: BaseLoss,
    #[serde(default)]
    pub include_background_in_jaccard: bool,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let base_loss = match kind {
            TaskKind::Binary => BaseLoss::BceLogits,
            _ => BaseLoss::CrossEntropy,
        };
        Self { kind, num_classes: kind.logit_channels(), base_loss, include_background_in_jaccard: false }
    }

    pub fn validate(&self) -> Result<()> {
        let expected_loss = TaskSpec::new(self.kind).base_loss;
        if self.base_loss != expected_loss {
            return Err(Error::TaskMismatch(format!(
                "{} task requires {:?}, got {:?}",
                self.kind, expected_loss, self.base_loss
            )));
        }
        if self.num_classes != self.kind.logit_channels() {
            return Err(Error::TaskMismatch(format!(
                "{} task has {} output channels, got {}",
                self.kind,
                self.kind.logit_channels(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Foreground classes scored by IoU/Dice.
    pub fn scored_classes(&self) -> std::ops::Range<u8> {
        1..self.kind.label_classes() as u8
    }
}
