//! AUROC with bootstrap intervals, paired tests with Bonferroni correction,
//! Fréchet feature distances and label co-occurrence.

mod auroc;
mod cooccurrence;
mod frechet;
mod report;

pub use auroc::{
    auroc, bonferroni, bootstrap_ci, bootstrap_indices, paired_compare, percentile, percentile_ci, ConfidenceInterval, PairedTest,
    DEFAULT_BOOTSTRAP_RETRIES,
};
pub use cooccurrence::{cooccurrence, flatten, matrix_correlation, CooccurrenceMatrix};
pub use frechet::{frechet_distance, FeatureStats};
pub use report::{compare_to_baseline, evaluate_predictions, test_labels, Comparison, EvalReport, FrechetEntry, LabelMetric};
