//! Confusion counts, scalar metrics, ROC/AUC, false-negative attribution and timing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// One scored sample. `score` is the fake probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub score: f64,
    pub true_label: Label,
    pub method: String,
    pub latency_seconds: f64,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::invalid(format!("score {} of `{}` is outside [0, 1]", self.score, self.sample_id)));
        }
        if !(self.latency_seconds >= 0.0 && self.latency_seconds.is_finite()) {
            return Err(Error::invalid(format!("latency of `{}` must be finite and non-negative", self.sample_id)));
        }
        Ok(())
    }

    /// Fake when the score reaches the threshold.
    pub fn predicted(&self, threshold: f64) -> Label {
        if self.score >= threshold {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

fn check_records(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("prediction records".into()));
    }
    records.iter().try_for_each(PredictionRecord::validate)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} is outside [0, 1]")));
    }
    Ok(())
}

/// Counts with fake as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn fakes(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn reals(&self) -> usize {
        self.tn + self.fp
    }
}

pub fn confusion(records: &[PredictionRecord], threshold: f64) -> Result<ConfusionMatrix> {
    check_records(records)?;
    check_threshold(threshold)?;
    let mut cm = ConfusionMatrix::default();
    for r in records {
        match (r.predicted(threshold), r.true_label) {
            (Label::Fake, Label::Fake) => cm.tp += 1,
            (Label::Fake, Label::Real) => cm.fp += 1,
            (Label::Real, Label::Real) => cm.tn += 1,
            (Label::Real, Label::Fake) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: f64,
    /// True-negative rate.
    pub accuracy_real: f64,
    /// True-positive rate.
    pub accuracy_fake: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero; they are reported as 0.
    pub degenerate: Vec<String>,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<ScalarMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix".into()));
    }
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let accuracy = (tp + tn) / n as f64;
    let accuracy_real = ratio("accuracy_real", tn, tn + fp);
    let accuracy_fake = ratio("accuracy_fake", tp, tp + fn_);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let f1 = ratio("f1", 2.0 * precision * recall, precision + recall);
    Ok(ScalarMetrics {
        accuracy,
        accuracy_real,
        accuracy_fake,
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
}

fn class_counts(records: &[PredictionRecord]) -> Result<(usize, usize)> {
    let fakes = records.iter().filter(|r| r.true_label == Label::Fake).count();
    let reals = records.len() - fakes;
    if fakes == 0 || reals == 0 {
        return Err(Error::UndefinedAuc(format!("{fakes} fake and {reals} real records; both classes are needed")));
    }
    Ok((fakes, reals))
}

/// Probability that a random fake outscores a random real, ties counting
/// one half, from midranks (Mann-Whitney U).
pub fn rank_auc(records: &[PredictionRecord]) -> Result<f64> {
    check_records(records)?;
    let (fakes, reals) = class_counts(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut fake_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // ranks are 1-based; a tie group shares its mean rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_fakes = order[i..=j].iter().filter(|&&k| records[k].true_label == Label::Fake).count();
        fake_rank_sum += midrank * tied_fakes as f64;
        i = j + 1;
    }
    let u = fake_rank_sum - (fakes * (fakes + 1)) as f64 / 2.0;
    Ok(u / (fakes as f64 * reals as f64))
}

/// Curve from sweeping the threshold down through every distinct score.
pub fn roc_points(records: &[PredictionRecord]) -> Result<Vec<(f64, f64)>> {
    check_records(records)?;
    let (fakes, reals) = class_counts(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].score.total_cmp(&records[a].score));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = records[order[i]].score;
        while i < order.len() && records[order[i]].score == s {
            match records[order[i]].true_label {
                Label::Fake => tp += 1,
                Label::Real => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / reals as f64, tp as f64 / fakes as f64));
    }
    Ok(points)
}

pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Rank AUC together with the curve it summarises.
pub fn roc_auc(records: &[PredictionRecord]) -> Result<Roc> {
    Ok(Roc {
        auc: rank_auc(records)?,
        points: roc_points(records)?,
    })
}

/// Fake records scored below the threshold, grouped by method.
pub fn fn_by_method(records: &[PredictionRecord], threshold: f64) -> Result<BTreeMap<String, usize>> {
    check_threshold(threshold)?;
    let mut out = BTreeMap::new();
    for r in records {
        r.validate()?;
        if r.true_label == Label::Fake && r.predicted(threshold) == Label::Real {
            *out.entry(r.method.clone()).or_default() += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub total_seconds: f64,
    pub samples: usize,
    pub mean_seconds_per_sample: f64,
}

impl TimingStats {
    pub fn from_totals(total_seconds: f64, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Empty("timing samples".into()));
        }
        if !(total_seconds >= 0.0 && total_seconds.is_finite()) {
            return Err(Error::invalid("total time must be finite and non-negative"));
        }
        Ok(TimingStats {
            total_seconds,
            samples,
            mean_seconds_per_sample: total_seconds / samples as f64,
        })
    }
}

pub fn timing_stats(records: &[PredictionRecord]) -> Result<TimingStats> {
    check_records(records)?;
    TimingStats::from_totals(records.iter().map(|r| r.latency_seconds).sum(), records.len())
}
