//! Synthetic worlds, cross-validation and the ablation table.

mod cv;
mod metrics;
mod synth;

pub use cv::{
    ablation_suite, fold_hash, kfold_cv, kfold_indices, reports_csv, reports_table, split_predictions,
    train_test_split, EvalConfig, MetricReport, ModelVariant, TaskMetric, DEFAULT_FOLDS, DEFAULT_TEST_FRACTION,
};
pub use metrics::{r2, rmse};
pub use synth::{generate_world, variable_name, SyntheticWorld, SyntheticWorldSpec};
