//! Run configuration files and binary checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CheckpointHeader, Dtype, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{EvalConfig, RunConfig};
