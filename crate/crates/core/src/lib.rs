//! Two-level nested U-structure for surgical instrument segmentation.

pub mod autograd;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod float;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod report;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use task::{TaskKind, TaskSpec};
