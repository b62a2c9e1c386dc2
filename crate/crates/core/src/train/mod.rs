//! Training harness: schedule, optimizer, synthetic data, checkpoints,
//! the training loop and ablation runs.

pub mod ablation;
pub mod adamw;
pub mod checkpoint;
pub mod data;
pub mod preprocess;
pub mod schedule;
pub mod trainer;

pub use adamw::AdamW;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{generate_scene, Batch, Preset, SceneSpec, SyntheticScene};
pub use schedule::{lr_at, TrainConfig};
pub use trainer::{evaluate, train_loop, train_synthetic, CheckpointPolicy, StepRecord, Trainer};
