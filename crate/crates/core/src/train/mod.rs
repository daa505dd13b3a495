//! Optimizer, configuration, checkpoints, metrics, the training loop and
//! discriminator benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use bench::{benchmark_disc, BenchResult, Discriminator};
pub use checkpoint::Checkpoint;
pub use config::{SaturationConfig, TrainConfig};
pub use metrics::{read_metrics, MetricsWriter, StepRecord};
pub use optim::{adamw_step, lr_at, AdamState, AdamWHyper};
pub use trainer::{RunSummary, SaturationMonitor, Trainer};
