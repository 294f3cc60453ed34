//! Datasets, checkpoints, run configuration, and reports.

mod checkpoint;
mod correlate;
mod data;
mod run;

pub use checkpoint::{Checkpoint, ModelKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use correlate::{correlate, CorrelationReport, CorrelationRow};
pub use data::{
    is_val, linear_baseline, splitmix64, ClassPattern, DatasetSpec, Manifest, Split, SyntheticDataset, DATASET_MAGIC,
    DATASET_VERSION, DATA_FILE, MANIFEST_FILE,
};
pub use run::{
    periodic_checkpoint, run_correlate, run_eval, run_search, run_supernet_train, run_train, EvalReport, Metrics, RankedGenotype,
    RunConfig, RunLog, SupernetMetrics, CHECKPOINT_FILE, LOG_FILE, METRICS_FILE, RANKED_FILE, RUN_CONFIG_VERSION,
};
