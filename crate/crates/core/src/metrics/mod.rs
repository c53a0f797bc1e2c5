//! Evaluation measures: overlap, volume and shape agreement, per-subtype
//! recall, lobe severity accuracy and weighted kappa.

mod overlap;
mod report;
mod severity;

pub use overlap::{apd, dsc, fdr, surface_area, surface_to_volume, svrd, tpr_subtype, Fdr};
pub use report::{
    evaluate_case, evaluate_cases, format_table, CaseMetrics, MetricsReport, SummaryRow, CONFUSION_FILE, KAPPA_FILE,
    METRICS_FILE, METRICS_HEADER, SUBTYPES, SUMMARY_FILE, TABLE_FILE,
};
pub use severity::{
    kappa_with_ci, linear_weighted_kappa, severity_accuracy, severity_pairs, weighted_kappa, ConfusionMatrix,
    KappaReport, BOOTSTRAP_RESAMPLES, NUM_SCORES,
};
