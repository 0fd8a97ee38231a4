//! Seeded, label-stratified train/val/test assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Label, ManifestEntry, Split};
use crate::error::{Error, Result};

const FRACTION_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = SplitSpec { train, val, test, seed };
        s.validate()?;
        Ok(s)
    }

    /// 87% / 10% / 3%, the split used for the larger corpus.
    pub fn large_corpus(seed: u64) -> Self {
        SplitSpec {
            train: 0.87,
            val: 0.10,
            test: 0.03,
            seed,
        }
    }

    /// 80% / 15% / 5%, the split used for the in-the-wild corpus.
    pub fn small_corpus(seed: u64) -> Self {
        SplitSpec {
            train: 0.80,
            val: 0.15,
            test: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::invalid(format!("split fractions must be finite and non-negative: {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > FRACTION_TOLERANCE {
            return Err(Error::invalid(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` entries: val and test are
    /// `round(fraction * n)`, train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let val = ((self.val * n as f64).round() as usize).min(n);
        // two rounded-up halves can overshoot a tiny n; test yields first
        let test = ((self.test * n as f64).round() as usize).min(n - val);
        (n - val - test, val, test)
    }
}

/// Splits `total` across buckets proportionally to `weights` (largest
/// remainder), never exceeding `caps`.
fn apportion(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let w_sum: usize = weights.iter().sum();
    if w_sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / w_sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().zip(caps).map(|(e, &c)| (e.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable on ties so the lower bucket index wins
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = total.saturating_sub(out.iter().sum());
    while left > 0 {
        let before = left;
        for &i in &order {
            if left > 0 && out[i] < caps[i] {
                out[i] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    out
}

/// Assigns every entry to train, val or test. Each label is shuffled
/// independently with the seed and cut according to its share of the split
/// sizes, so every split keeps the global class balance up to rounding.
pub fn split_dataset(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    if let Some(e) = entries.iter().find(|e| e.split != Split::Unassigned) {
        return Err(Error::AlreadyAssigned(e.sample_id.clone()));
    }
    let n = entries.len();
    let (_, n_val, n_test) = spec.counts(n);
    let groups: Vec<Vec<usize>> = [Label::Real, Label::Fake]
        .iter()
        .map(|&l| (0..n).filter(|&i| entries[i].label == l).collect())
        .collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let val = apportion(n_val, &sizes, &sizes);
    let room: Vec<usize> = sizes.iter().zip(&val).map(|(s, v)| s - v).collect();
    let test = apportion(n_test, &sizes, &room);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = entries.to_vec();
    for (g, mut idx) in groups.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        for (rank, i) in idx.into_iter().enumerate() {
            out[i].split = if rank < val[g] {
                Split::Val
            } else if rank < val[g] + test[g] {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}
