//! Training harness: synthetic dataset, schedule, loop, checkpoints,
//! evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use data::{make_toy_dataset, DatasetConfig, Split, ToyDataset, ToySample};
pub use evaluate::{evaluate, EvalMetrics};
pub use schedule::{lr_at, ScheduleConfig};
pub use train::{train, AdamState, StepMetrics, TrainState};
