//! Property tests for the invariants of the numeric primitives, the data
//! pipeline and the metrics harness. Oracles here are written independently
//! of the library code they check.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use dfbench::baselines::spsl_phase_features;
use dfbench::data::{
    augment_with_report, sample_frames, sample_indices, split_dataset, AugmentationConfig, Label, ManifestEntry,
    Split, SplitSpec, Transform,
};
use dfbench::evaluation::{
    confusion, fn_by_method, rank_auc, roc_auc, scalar_metrics, trapezoid_auc, PredictionRecord,
};
use dfbench::nn::{conv1d_reference, cross_entropy_loss, gelu, kl_diag_gaussian, mse_loss, relu, sigmoid};
use dfbench::Tensor;
use proptest::prelude::*;

const METHODS: [&str; 4] = ["facefusion", "facefusion_gan", "retalking", "wav2lip"];

fn record(i: usize, score: f64, fake: bool, method: usize) -> PredictionRecord {
    PredictionRecord {
        sample_id: format!("s{i}"),
        score,
        true_label: if fake { Label::Fake } else { Label::Real },
        method: if fake { METHODS[method % 4].into() } else { "original".into() },
        latency_seconds: 0.01 * i as f64,
    }
}

/// Scores on a 1/20 grid so ties are common.
fn records(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0u32..=20, any::<bool>(), 0usize..4), 1..=max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, fake, m))| record(i, f64::from(s) / 20.0, fake, m))
            .collect()
    })
}

/// Record sets holding both classes.
fn two_class(max: usize) -> impl Strategy<Value = Vec<PredictionRecord>> {
    records(max).prop_filter("both classes", |r| {
        r.iter().any(|x| x.true_label == Label::Fake) && r.iter().any(|x| x.true_label == Label::Real)
    })
}

/// Mann-Whitney by enumerating every (fake, real) pair.
fn pairwise_auc(recs: &[PredictionRecord]) -> f64 {
    let fakes: Vec<f64> = recs.iter().filter(|r| r.true_label == Label::Fake).map(|r| r.score).collect();
    let reals: Vec<f64> = recs.iter().filter(|r| r.true_label == Label::Real).map(|r| r.score).collect();
    let mut wins = 0.0;
    for f in &fakes {
        for r in &reals {
            wins += if f > r { 1.0 } else if f == r { 0.5 } else { 0.0 };
        }
    }
    wins / (fakes.len() * reals.len()) as f64
}

fn with_scores(recs: &[PredictionRecord], f: impl Fn(f64) -> f64) -> Vec<PredictionRecord> {
    recs.iter().map(|r| PredictionRecord { score: f(r.score), ..r.clone() }).collect()
}

fn flip_labels(recs: &[PredictionRecord]) -> Vec<PredictionRecord> {
    recs.iter()
        .map(|r| PredictionRecord {
            true_label: if r.true_label == Label::Fake { Label::Real } else { Label::Fake },
            ..r.clone()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn confusion_matches_enumeration(recs in records(200), t in 0.0f64..=1.0) {
        let cm = confusion(&recs, t).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for r in &recs {
            match (r.true_label == Label::Fake, r.score >= t) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        prop_assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (tp, fp, tn, fn_));
        prop_assert_eq!(cm.tp + cm.fp + cm.tn + cm.fn_, recs.len());
    }

    #[test]
    fn scalar_metrics_stay_in_unit_interval(recs in records(200), t in 0.0f64..=1.0) {
        let m = scalar_metrics(&confusion(&recs, t).unwrap()).unwrap();
        for v in [m.accuracy, m.accuracy_real, m.accuracy_fake, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn accuracy_decomposes_by_class(recs in records(200), t in 0.0f64..=1.0) {
        let cm = confusion(&recs, t).unwrap();
        let m = scalar_metrics(&cm).unwrap();
        let (nf, nr) = ((cm.tp + cm.fn_) as f64, (cm.tn + cm.fp) as f64);
        let mixed = (nf * m.accuracy_fake + nr * m.accuracy_real) / recs.len() as f64;
        prop_assert!((m.accuracy - mixed).abs() <= 1e-12, "{} vs {}", m.accuracy, mixed);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(recs in records(200), t in 0.0f64..=1.0) {
        let m = scalar_metrics(&confusion(&recs, t).unwrap()).unwrap();
        if !m.degenerate.iter().any(|d| d == "f1") {
            let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
            prop_assert!(lo - 1e-12 <= m.f1 && m.f1 <= hi + 1e-12);
        }
    }

    #[test]
    fn false_negatives_attribute_to_methods(recs in records(200), t in 0.0f64..=1.0) {
        let by_method = fn_by_method(&recs, t).unwrap();
        let cm = confusion(&recs, t).unwrap();
        prop_assert_eq!(by_method.values().sum::<usize>(), cm.fn_);
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.true_label == Label::Fake && r.score < t) {
            *expected.entry(r.method.clone()).or_default() += 1;
        }
        for (m, n) in &by_method {
            prop_assert_eq!(*n, expected.get(m).copied().unwrap_or(0));
        }
    }

    #[test]
    fn rank_auc_matches_pairs_and_trapezoid(recs in two_class(200)) {
        let auc = rank_auc(&recs).unwrap();
        let roc = roc_auc(&recs).unwrap();
        prop_assert!((auc - pairwise_auc(&recs)).abs() < 1e-12);
        prop_assert!((auc - trapezoid_auc(&roc.points)).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn roc_points_are_monotone(recs in two_class(200)) {
        let pts = roc_auc(&recs).unwrap().points;
        prop_assert_eq!(pts.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(pts.last().copied(), Some((1.0, 1.0)));
        for w in pts.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms(recs in two_class(200), shift in -3.0f64..3.0) {
        let auc = rank_auc(&recs).unwrap();
        let cubed = rank_auc(&with_scores(&recs, |s| s * s * s)).unwrap();
        let squashed = rank_auc(&with_scores(&recs, |s| 1.0 / (1.0 + (-(s + shift)).exp()))).unwrap();
        prop_assert!((auc - cubed).abs() < 1e-12);
        prop_assert!((auc - squashed).abs() < 1e-12);
    }

    #[test]
    fn auc_label_flip_symmetry(recs in two_class(200)) {
        let auc = rank_auc(&recs).unwrap();
        let flipped = flip_labels(&recs);
        let mirrored = rank_auc(&with_scores(&flipped, |s| 1.0 - s)).unwrap();
        prop_assert!((auc - mirrored).abs() < 1e-12);
        prop_assert!((rank_auc(&flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }
}

fn entries(n_real: usize, n_fake: usize) -> Vec<ManifestEntry> {
    (0..n_real + n_fake)
        .map(|i| {
            let fake = i >= n_real;
            ManifestEntry {
                sample_id: format!("clip{i:05}"),
                frames: vec![PathBuf::from(format!("f/{i}.png"))],
                label: if fake { Label::Fake } else { Label::Real },
                method: if fake { METHODS[i % 4].into() } else { "original".into() },
                split: Split::Unassigned,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_input(n_real in 0usize..300, n_fake in 0usize..300, seed in any::<u64>(), large in any::<bool>()) {
        prop_assume!(n_real + n_fake > 0);
        let input = entries(n_real, n_fake);
        let spec = if large { SplitSpec::large_corpus(seed) } else { SplitSpec::small_corpus(seed) };
        let out = split_dataset(&input, &spec).unwrap();
        prop_assert_eq!(out.len(), input.len());
        let ids: BTreeSet<&str> = out.iter().map(|e| e.sample_id.as_str()).collect();
        let want: BTreeSet<&str> = input.iter().map(|e| e.sample_id.as_str()).collect();
        prop_assert_eq!(ids, want);
        prop_assert!(out.iter().all(|e| e.split != Split::Unassigned));
        let count = |s: Split| out.iter().filter(|e| e.split == s).count();
        prop_assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), spec.counts(input.len()));
    }

    #[test]
    fn split_stratifies_large_sets(n in 500usize..1500, fake_share in 0.2f64..0.8, seed in any::<u64>()) {
        let n_fake = (n as f64 * fake_share).round() as usize;
        let out = split_dataset(&entries(n - n_fake, n_fake), &SplitSpec::small_corpus(seed)).unwrap();
        let global = n_fake as f64 / n as f64;
        for s in [Split::Train, Split::Val, Split::Test] {
            let part: Vec<_> = out.iter().filter(|e| e.split == s).collect();
            let frac = part.iter().filter(|e| e.label == Label::Fake).count() as f64 / part.len() as f64;
            prop_assert!((frac - global).abs() <= 0.02, "{:?}: {} vs {}", s, frac, global);
        }
    }

    #[test]
    fn frame_sampling_is_monotone(n in 0usize..200, k in 1usize..40) {
        let idx = sample_indices(n, k).unwrap();
        prop_assert_eq!(idx.len(), n.min(k));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        let frames: Vec<usize> = (100..100 + n).collect();
        let picked = sample_frames(&frames, k).unwrap();
        if n <= k {
            prop_assert_eq!(&picked, &frames);
        }
        prop_assert_eq!(sample_frames(&picked, k).unwrap(), picked);
    }

    #[test]
    fn augmentation_keeps_shape_and_range(seed in any::<u64>(), h in 4usize..20, w in 4usize..20, t in 0usize..Transform::ALL.len()) {
        let img = Tensor::from_fn(vec![3, h, w], |i| ((i * 7919 + seed as usize) % 101) as f64 / 100.0);
        let cfg = AugmentationConfig { rate: 1.0, transforms: vec![Transform::ALL[t]], ..AugmentationConfig::default() };
        let (out, chain) = augment_with_report(&img, &cfg, seed).unwrap();
        prop_assert_eq!(chain, vec![Transform::ALL[t]]);
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phase_channel_ignores_brightness_scale(seed in any::<u64>(), side in 2usize..12) {
        let side = side * 2;
        let img = Tensor::from_fn(vec![3, side, side], |i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
            0.05 + 0.45 * ((x >> 33) % 1000) as f64 / 1000.0
        });
        let a = spsl_phase_features(&img).unwrap();
        let b = spsl_phase_features(&img.map(|v| 2.0 * v)).unwrap();
        let plane = side * side;
        for (x, y) in a.data()[3 * plane..].iter().zip(&b.data()[3 * plane..]) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1d_matches_double_loop(f in prop::collection::vec(-1.0f64..1.0, 1..=32), g in prop::collection::vec(-1.0f64..1.0, 1..=32)) {
        let mut naive = vec![0.0; f.len() + g.len() - 1];
        for (i, a) in f.iter().enumerate() {
            for (j, b) in g.iter().enumerate() {
                naive[i + j] += a * b;
            }
        }
        let got = conv1d_reference(&Tensor::from_vec(f), &Tensor::from_vec(g)).unwrap();
        prop_assert_eq!(got.data(), naive.as_slice());
    }
}

proptest! {
    #[test]
    fn sigmoid_is_bounded_and_symmetric(x in prop::collection::vec(-30.0f64..30.0, 1..64)) {
        let t = Tensor::from_vec(x);
        let (p, q) = (sigmoid(&t), sigmoid(&t.map(|v| -v)));
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!(*a > 0.0 && *a < 1.0);
            prop_assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn relu_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let once = relu(&Tensor::from_vec(x));
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn losses_are_non_negative(
        a in prop::collection::vec(0.0f64..1.0, 8),
        b in prop::collection::vec(0.0f64..1.0, 8),
        labels in prop::collection::vec(any::<bool>(), 8),
        logvar in prop::collection::vec(-4.0f64..4.0, 8),
    ) {
        let (ta, tb) = (Tensor::from_vec(a.clone()), Tensor::from_vec(b));
        prop_assert!(mse_loss(&ta, &tb).unwrap().value >= 0.0);
        prop_assert_eq!(mse_loss(&ta, &ta).unwrap().value, 0.0);
        let y = Tensor::from_vec(labels.iter().map(|&l| f64::from(u8::from(l))).collect());
        prop_assert!(cross_entropy_loss(&y, &ta).unwrap().value >= 0.0);
        prop_assert!(kl_diag_gaussian(&tb, &Tensor::from_vec(logvar)).unwrap().value >= 0.0);
    }
}

/// The exact GELU dips to its minimum near x = -0.7518 and rises on either side of it.
#[test]
fn gelu_is_unimodal_on_grid() {
    assert_eq!(gelu(&Tensor::from_vec(vec![0.0])).item(), 0.0);
    let grid = Tensor::from_fn(vec![2001], |i| -10.0 + 0.01 * i as f64);
    let y = gelu(&grid);
    let argmin = (0..y.len()).min_by(|&a, &b| y.data()[a].total_cmp(&y.data()[b])).unwrap();
    assert!((grid.data()[argmin] + 0.75).abs() < 0.011, "minimum at {}", grid.data()[argmin]);
    assert!(y.data()[..=argmin].windows(2).all(|w| w[0] >= w[1]));
    assert!(y.data()[argmin..].windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn loss_zero_conditions() {
    let y = Tensor::from_vec(vec![1.0, 0.0, 1.0]);
    assert_eq!(cross_entropy_loss(&y, &y).unwrap().value, 0.0);
    let z = Tensor::zeros(vec![5]);
    assert_eq!(kl_diag_gaussian(&z, &z).unwrap().value, 0.0);
}

#[test]
fn augmentation_rate_extremes() {
    let img = Tensor::from_fn(vec![3, 8, 8], |i| (i % 17) as f64 / 16.0);
    for seed in 0..200 {
        let never = AugmentationConfig { rate: 0.0, ..AugmentationConfig::default() };
        assert!(augment_with_report(&img, &never, seed).unwrap().1.is_empty());
        let always = AugmentationConfig { rate: 1.0, ..AugmentationConfig::default() };
        assert!(!augment_with_report(&img, &always, seed).unwrap().1.is_empty());
    }
}

#[test]
fn augmentation_half_rate_converges() {
    let img = Tensor::from_fn(vec![3, 4, 4], |i| (i % 5) as f64 / 4.0);
    let cfg = AugmentationConfig { rate: 0.5, ..AugmentationConfig::default() };
    let n = 4000;
    let altered = (0..n).filter(|&s| !augment_with_report(&img, &cfg, s).unwrap().1.is_empty()).count();
    let frac = altered as f64 / n as f64;
    // 4σ of a Bernoulli(0.5) mean over 4000 draws
    assert!((frac - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt(), "{frac}");
}
