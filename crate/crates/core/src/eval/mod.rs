//! Evaluation: metrics and the baseline-ladder experiment.

mod experiment;
mod metrics;
mod table;

pub use experiment::{
    config_digest, run_experiment, run_experiment_on, split_digest, ExperimentConfig, ExperimentError, ExperimentReport, Variant,
    VariantReport,
};
pub use metrics::{
    cardinality_bucket, compute_metrics, Bucket, BucketCounts, Counts, MetricsError, MetricsReport, Overall, Prf,
};
pub use table::{format_table, TableRow};
