//! Metrics harness: confusion statistics, ROC/AUC, per-method false
//! negatives, latency accounting, prediction dumps and report files.
//!
//! Fake is the positive class and a score at or above the threshold
//! predicts fake. Metrics with a zero denominator are reported as 0 and
//! named in the report's `degenerate` list.

mod metrics;
mod predict;
mod report;

pub use metrics::{
    confusion, fn_by_method, rank_auc, roc_auc, roc_points, scalar_metrics, timing_stats, trapezoid_auc,
    ConfusionMatrix, PredictionRecord, Roc, ScalarMetrics, TimingStats,
};
pub use predict::{
    predict_manifest, read_jsonl, read_predictions, write_jsonl, Aggregation, FrameScore, PredictOptions,
};
pub use report::{
    comparison_table, emit_report, read_report, MetricsReport, ReportFiles, HEADLINE_METRICS, METRICS_FILE,
    REPORT_FILE, ROC_FILE,
};
