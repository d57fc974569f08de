//! The nested U-structure: configuration, blocks and the full network.

mod blocks;
pub mod config;
mod network;

pub use blocks::{dilated_receptive_field, UnitKind};
pub use config::{validate_config, ModelConfig, Normalization, RsuConfig, ValidatedConfig};
pub use network::{model_forward, parameter_count, rsu4f_forward, rsu_forward, Model, RsuBlock};
