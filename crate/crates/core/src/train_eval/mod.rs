//! Training loop, evaluation, frozen-feature probes, checkpoints and reports.

pub mod checkpoint;
pub mod metrics;
pub mod probes;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use metrics::Metrics;
pub use probes::{knn3_predict, knn3_predict_with, passive_aggressive, pool_features, pool_store, run_probe, Features, Pooling, ProbeConfig, ProbeKind};
pub use report::report;
pub use train::{derive_seed, evaluate, train, train_with, Classifier, EpochRecord, ModelSpec, Stopping, TrainConfig, TrainOutcome};
