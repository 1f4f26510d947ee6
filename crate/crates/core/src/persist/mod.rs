//! Flat `key = value` run configuration and binary training checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_train_config, train_config_text, RunConfig, TRAIN_KEYS};
