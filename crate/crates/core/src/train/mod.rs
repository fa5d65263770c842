//! Run configuration, optimiser, training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod trainer;

pub use checkpoint::{checkpoint_config, load_checkpoint, save_checkpoint, CheckpointState};
pub use config::{ProviderKind, RunConfig, Schedule, TrainingConfig};
pub use optim::{clip_grad_norm, learning_rate, AdamW};
pub use trainer::{StepRecord, Trainer};
