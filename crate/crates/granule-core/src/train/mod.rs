//! Adam optimization, the epoch loop with early stopping, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod engine;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use engine::{train, EarlyStop, EpochRecord, TrainHistory};
