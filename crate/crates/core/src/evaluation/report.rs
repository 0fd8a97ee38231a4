//! Per-model reports on disk and the cross-model comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{
    confusion, fn_by_method, roc_auc, scalar_metrics, timing_stats, ConfusionMatrix, PredictionRecord, TimingStats,
};
use crate::data::write_atomic;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.txt";
pub const ROC_FILE: &str = "roc.tsv";

/// Headline metric names, in the order tables list them.
pub const HEADLINE_METRICS: [&str; 7] = ["accuracy", "accuracy_real", "accuracy_fake", "auc", "f1", "precision", "recall"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub accuracy_real: f64,
    pub accuracy_fake: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub degenerate: Vec<String>,
    pub roc_points: Vec<(f64, f64)>,
    pub fn_by_method: BTreeMap<String, usize>,
    pub timing: TimingStats,
}

impl MetricsReport {
    pub fn from_records(model: &str, records: &[PredictionRecord], threshold: f64) -> Result<Self> {
        let cm = confusion(records, threshold)?;
        let m = scalar_metrics(&cm)?;
        let roc = roc_auc(records)?;
        Ok(MetricsReport {
            model: model.into(),
            threshold,
            confusion: cm,
            accuracy: m.accuracy,
            accuracy_real: m.accuracy_real,
            accuracy_fake: m.accuracy_fake,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: roc.auc,
            degenerate: m.degenerate,
            roc_points: roc.points,
            fn_by_method: fn_by_method(records, threshold)?,
            timing: timing_stats(records)?,
        })
    }

    /// The seven headline values in [`HEADLINE_METRICS`] order.
    pub fn headline(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.accuracy_real,
            self.accuracy_fake,
            self.auc,
            self.f1,
            self.precision,
            self.recall,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub metrics: PathBuf,
    pub roc: PathBuf,
}

fn metrics_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(s, "model\t{}", r.model).unwrap();
    for (name, v) in HEADLINE_METRICS.iter().zip(r.headline()) {
        writeln!(s, "{name}\t{v:.6}").unwrap();
    }
    let cm = &r.confusion;
    writeln!(s, "confusion\ttp={} fp={} tn={} fn={}", cm.tp, cm.fp, cm.tn, cm.fn_).unwrap();
    for (method, n) in &r.fn_by_method {
        writeln!(s, "false_negatives[{method}]\t{n}").unwrap();
    }
    writeln!(
        s,
        "timing\ttotal={:.6}s samples={} mean={:.6}s",
        r.timing.total_seconds, r.timing.samples, r.timing.mean_seconds_per_sample
    )
    .unwrap();
    if !r.degenerate.is_empty() {
        writeln!(s, "degenerate\t{}", r.degenerate.join(",")).unwrap();
    }
    s
}

/// Writes `report.json`, `metrics.txt` and `roc.tsv` (one `fpr<TAB>tpr` row per point) into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        report: dir.join(REPORT_FILE),
        metrics: dir.join(METRICS_FILE),
        roc: dir.join(ROC_FILE),
    };
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&files.report, json.as_bytes())?;
    write_atomic(&files.metrics, metrics_text(report).as_bytes())?;
    let roc: String = report.roc_points.iter().map(|(x, y)| format!("{x}\t{y}\n")).collect();
    write_atomic(&files.roc, roc.as_bytes())?;
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Tab-separated table, best AUC first (ties by model name); percentages
/// for the accuracies, precision, recall and F1, a fraction for AUC.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| b.auc.total_cmp(&a.auc).then_with(|| a.model.cmp(&b.model)));
    let mut s = String::from("model\tacc_%\tacc_real_%\tacc_fake_%\tauc\tf1_%\tprecision_%\trecall_%\tmean_s_per_sample\n");
    for r in sorted {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{:.4}",
            r.model,
            pct(r.accuracy),
            pct(r.accuracy_real),
            pct(r.accuracy_fake),
            r.auc,
            pct(r.f1),
            pct(r.precision),
            pct(r.recall),
            r.timing.mean_seconds_per_sample
        )
        .unwrap();
    }
    s
}
