//! Scoring manifest samples and prediction dump files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::metrics::PredictionRecord;
use crate::data::{resize_normalize, sample_frames, write_atomic, FaceCropper, Manifest, Split};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How per-frame fake probabilities become one sample score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    /// Fraction of frames scored at least 0.5, so a tied vote counts as fake.
    Majority,
}

impl Aggregation {
    pub fn apply(self, scores: &[f64]) -> Result<f64> {
        if scores.is_empty() {
            return Err(Error::Empty("frame scores".into()));
        }
        let n = scores.len() as f64;
        Ok(match self {
            Aggregation::Mean => scores.iter().sum::<f64>() / n,
            Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Majority => scores.iter().filter(|&&s| s >= 0.5).count() as f64 / n,
        })
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Majority => "majority",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "majority" => Ok(Aggregation::Majority),
            _ => Err(Error::invalid(format!("unknown aggregation `{s}` (mean, max or majority)"))),
        }
    }
}

/// Per-frame score, for checking the aggregation afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub sample_id: String,
    pub frame: PathBuf,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    /// Frames sampled per clip.
    pub frames: usize,
    pub aggregation: Aggregation,
    /// Only entries of this split; all entries when `None`.
    pub split: Option<Split>,
}

/// Scores each selected entry from up to `frames` evenly spaced frames.
/// Samples run one after another so each latency covers decoding and
/// inference of that sample alone; records follow manifest order.
pub fn predict_manifest(
    detector: &dyn Detector,
    manifest: &Manifest,
    opts: &PredictOptions,
    cropper: &dyn FaceCropper,
) -> Result<(Vec<PredictionRecord>, Vec<FrameScore>)> {
    let size = detector.input_size();
    let mut records = Vec::new();
    let mut frame_scores = Vec::new();
    for e in manifest.entries.iter().filter(|e| opts.split.is_none_or(|s| e.split == s)) {
        let started = Instant::now();
        let frames = sample_frames(&e.frames, opts.frames)?;
        let images = frames
            .iter()
            .map(|f| resize_normalize(&cropper.crop(&manifest.resolve(f))?, size))
            .collect::<Result<Vec<_>>>()?;
        let scores = detector.fake_probabilities(&Tensor::stack(&images)?)?;
        let score = opts.aggregation.apply(&scores)?.clamp(0.0, 1.0);
        let latency_seconds = started.elapsed().as_secs_f64();
        records.push(PredictionRecord {
            sample_id: e.sample_id.clone(),
            score,
            true_label: e.label,
            method: e.method.clone(),
            latency_seconds,
        });
        frame_scores.extend(frames.into_iter().zip(scores).map(|(frame, score)| FrameScore {
            sample_id: e.sample_id.clone(),
            frame,
            score,
        }));
    }
    if records.is_empty() {
        return Err(Error::Empty("no manifest entries matched the requested split".into()));
    }
    Ok((records, frame_scores))
}

/// One JSON object per line, written atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads a prediction dump and validates every record.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    records.iter().try_for_each(PredictionRecord::validate)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{BuildOptions, Registry};
    use crate::data::{load_manifest, write_synthetic_corpus, IdentityCropper, Label};
    use crate::genconvit::ScalePreset;

    #[test]
    fn aggregations() {
        let s = [0.2, 0.6, 0.7, 0.1];
        assert!((Aggregation::Mean.apply(&s).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(Aggregation::Max.apply(&s).unwrap(), 0.7);
        assert_eq!(Aggregation::Majority.apply(&s).unwrap(), 0.5);
        assert!(Aggregation::Mean.apply(&[]).is_err());
        assert_eq!("max".parse::<Aggregation>().unwrap(), Aggregation::Max);
        assert!("median".parse::<Aggregation>().is_err());
    }

    #[test]
    fn predictions_average_frames_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write_synthetic_corpus(dir.path(), 3, 6, 64, 0).unwrap()).unwrap();
        let det = Registry::with_defaults()
            .build("meso4", &BuildOptions::new(ScalePreset::Desk, 0))
            .unwrap();
        let opts = PredictOptions {
            frames: 4,
            aggregation: Aggregation::Mean,
            split: None,
        };
        let (records, frames) = predict_manifest(det.as_ref(), &m, &opts, &IdentityCropper).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(frames.len(), 12);
        for r in &records {
            let mine: Vec<f64> = frames.iter().filter(|f| f.sample_id == r.sample_id).map(|f| f.score).collect();
            assert!((r.score - mine.iter().sum::<f64>() / mine.len() as f64).abs() < 1e-15);
        }
        assert_eq!(records[0].true_label, Label::Real);
        let (again, _) = predict_manifest(det.as_ref(), &m, &opts, &IdentityCropper).unwrap();
        assert!(records.iter().zip(&again).all(|(a, b)| a.score == b.score));
        let path = dir.path().join("preds.jsonl");
        write_jsonl(&path, &records).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), records);
        let test_only = PredictOptions { split: Some(Split::Test), ..opts };
        assert!(predict_manifest(det.as_ref(), &m, &test_only, &IdentityCropper).is_err());
    }
}
