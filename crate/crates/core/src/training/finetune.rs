use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::EpochRecord;
use crate::autodiff::Graph;
use crate::data::{augment, AugmentationConfig, ImageSet};
use crate::detector::{fake_probabilities_from_logits, load_weights, Detector, FAKE, REAL};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

/// Losses above this count as divergence even when finite.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: String,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Epochs at which a checkpoint is written; training runs to the largest.
    pub epochs: Vec<usize>,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    /// Resume weights, optimizer state and history from this checkpoint.
    pub checkpoint_in: Option<PathBuf>,
    /// Directory for the per-epoch checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only JSONL epoch log.
    pub log_path: Option<PathBuf>,
}

impl TrainConfig {
    /// Per-model defaults: the autoencoder network at batch 32 swept over
    /// epochs 4/5/8/10, the variational network at batch 16 over 4/5/6/8/10,
    /// both at lr 1e-4; baselines at lr 2e-4, batch 32, 5 epochs.
    pub fn for_model(model: &str) -> Self {
        let (learning_rate, batch_size, epochs) = match model {
            "genconvit_ae" | "genconvit" => (1e-4, 32, vec![4, 5, 8, 10]),
            "genconvit_vae" => (1e-4, 16, vec![4, 5, 6, 8, 10]),
            _ => (2e-4, 32, vec![5]),
        };
        let adam = AdamConfig::new(learning_rate);
        TrainConfig {
            model: model.into(),
            learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size,
            epochs,
            augmentation: AugmentationConfig::default(),
            seed: 0,
            checkpoint_in: None,
            checkpoint_dir: None,
            log_path: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return Err(Error::invalid("epochs must list at least one positive epoch"));
        }
        self.augmentation.validate()
    }
}

/// Mixes a base seed with stream coordinates (splitmix64 finaliser).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Eval-mode mean loss and accuracy over `set`; weights are not touched.
pub fn evaluate_epoch(detector: &dyn Detector, set: &ImageSet, batch_size: usize) -> Result<EpochEval> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (images, labels) = set.batch(chunk)?;
        let g = Graph::new();
        let x = g.constant(images);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = detector.forward(&g, x, Mode::Eval, &mut rng)?;
        let loss = detector.loss(&g, &out, x, &labels)?.value(&g).value;
        loss_sum += loss * chunk.len() as f64;
        let probs = fake_probabilities_from_logits(&g.value(out.logits))?;
        correct += probs
            .iter()
            .zip(&labels)
            .filter(|(&p, &l)| (if p >= 0.5 { FAKE } else { REAL }) == l)
            .count();
    }
    Ok(EpochEval {
        loss: loss_sum / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last epoch.
    pub checkpoint: Checkpoint,
    /// `(epoch, path)` of every checkpoint written.
    pub saved: Vec<(usize, PathBuf)>,
}

fn snapshot(detector: &dyn Detector, epoch: usize, history: &[EpochRecord], adam: &Adam) -> Checkpoint {
    Checkpoint {
        model: detector.name().into(),
        config: detector.config_echo(),
        epoch,
        history: history.to_vec(),
        params: detector.params().clone(),
        optimizer: Some(adam.clone()),
    }
}

pub fn checkpoint_path(dir: &Path, model: &str, epoch: usize) -> PathBuf {
    dir.join(format!("{model}_epoch{epoch:03}.ckpt"))
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let line = serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn augmented_batch(set: &ImageSet, idx: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<(Tensor, Vec<usize>)> {
    if cfg.augmentation.rate == 0.0 {
        return set.batch(idx);
    }
    let base = derive_seed(cfg.seed, &[cfg.augmentation.seed]);
    let images = idx
        .iter()
        .map(|&i| augment(&set.images[i], &cfg.augmentation, derive_seed(base, &[epoch as u64, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&images)?, idx.iter().map(|&i| set.labels[i]).collect()))
}

/// Trains `detector` with Adam over reshuffled mini-batches until the last
/// listed epoch, evaluating on `val` after each epoch. A loss that is
/// non-finite or above [`DIVERGENCE_THRESHOLD`] aborts with the state from
/// the end of the previous epoch.
pub fn finetune(detector: &mut dyn Detector, cfg: &TrainConfig, train: &ImageSet, val: &ImageSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut adam = Adam::new(cfg.adam())?;
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(path) = &cfg.checkpoint_in {
        let ckpt = load_checkpoint(path)?;
        if ckpt.model != detector.name() {
            return Err(Error::invalid(format!(
                "checkpoint holds `{}`, not `{}`",
                ckpt.model,
                detector.name()
            )));
        }
        load_weights(detector, &ckpt.params)?;
        if let Some(state) = ckpt.optimizer {
            // keep the moments, take the learning settings from this run
            adam = Adam {
                config: cfg.adam(),
                ..state
            };
        }
        start = ckpt.epoch;
        history = ckpt.history;
    }

    let mut last_good = snapshot(detector, start, &history, &adam);
    let mut saved = Vec::new();
    for epoch in start + 1..=cfg.total_epochs() {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = augmented_batch(train, idx, cfg, epoch)?;
            let g = Graph::new();
            let x = g.constant(images);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, b as u64, 1]));
            let out = detector.forward(&g, x, Mode::Train, &mut rng)?;
            let terms = detector.loss(&g, &out, x, &labels)?;
            let loss = g.value(terms.total).item();
            if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    last_good: Some(Box::new(last_good)),
                });
            }
            let grads = g.backward(terms.total)?;
            adam.step(detector.params_mut(), &g.param_grads(&grads))?;
            detector.params_mut().apply_buffer_updates(g.take_buffer_updates())?;
            loss_sum += loss * idx.len() as f64;
        }
        let eval = evaluate_epoch(detector, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_acc: eval.accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(path) = &cfg.log_path {
            append_log(path, &record)?;
        }
        history.push(record);
        last_good = snapshot(detector, epoch, &history, &adam);
        if let (true, Some(dir)) = (cfg.epochs.contains(&epoch), &cfg.checkpoint_dir) {
            let path = checkpoint_path(dir, detector.name(), epoch);
            save_checkpoint(&last_good, &path)?;
            saved.push((epoch, path));
        }
    }
    Ok(TrainOutcome {
        checkpoint: last_good,
        saved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{BuildOptions, Registry};
    use crate::data::blob_set;
    use crate::genconvit::ScalePreset;

    fn meso() -> Box<dyn Detector> {
        Registry::with_defaults()
            .build("meso4", &BuildOptions::new(ScalePreset::Desk, 0))
            .unwrap()
    }

    fn quick(model: &str) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: vec![1, 2],
            augmentation: AugmentationConfig::disabled(),
            ..TrainConfig::for_model(model)
        }
    }

    #[test]
    fn published_defaults() {
        let a = TrainConfig::for_model("genconvit_ae");
        assert_eq!((a.learning_rate, a.batch_size, a.epochs.clone()), (1e-4, 32, vec![4, 5, 8, 10]));
        let b = TrainConfig::for_model("genconvit_vae");
        assert_eq!((b.learning_rate, b.batch_size, b.epochs.clone()), (1e-4, 16, vec![4, 5, 6, 8, 10]));
        assert_eq!(TrainConfig::for_model("meso4").learning_rate, 2e-4);
        assert!(TrainConfig { batch_size: 0, ..a.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: vec![], ..a }.validate().is_err());
    }

    #[test]
    fn evaluation_is_pure_and_bounded() {
        let m = meso();
        let set = blob_set(6, 64, 1);
        let before = m.params().clone();
        let a = evaluate_epoch(m.as_ref(), &set, 4).unwrap();
        assert_eq!(a, evaluate_epoch(m.as_ref(), &set, 4).unwrap());
        assert!((0.0..=1.0).contains(&a.accuracy));
        assert_eq!(m.params(), &before);
        assert!(evaluate_epoch(m.as_ref(), &ImageSet::default(), 4).is_err());
    }

    #[test]
    fn seeded_runs_repeat_and_write_sweep_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let set = blob_set(8, 64, 2);
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().into()),
            log_path: Some(dir.path().join("log.jsonl")),
            augmentation: AugmentationConfig {
                rate: 0.5,
                ..AugmentationConfig::default()
            },
            ..quick("meso4")
        };
        let mut m1 = meso();
        let out1 = finetune(m1.as_mut(), &cfg, &set, &set).unwrap();
        let mut m2 = meso();
        let out2 = finetune(m2.as_mut(), &TrainConfig { checkpoint_dir: None, log_path: None, ..cfg.clone() }, &set, &set)
            .unwrap();
        let (h1, h2) = (&out1.checkpoint.history, &out2.checkpoint.history);
        assert_eq!(h1.len(), 2);
        assert!((h1[0].train_loss - h2[0].train_loss).abs() < 1e-6);
        assert_eq!(out1.checkpoint.params, out2.checkpoint.params);
        assert_eq!(out1.saved.len(), 2);
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let reloaded = load_checkpoint(&out1.saved[1].1).unwrap();
        assert_eq!(reloaded.params, out1.checkpoint.params);
        assert_eq!(reloaded.epoch, 2);
    }

    #[test]
    fn resuming_continues_the_epoch_count() {
        let dir = tempfile::tempdir().unwrap();
        let set = blob_set(4, 64, 3);
        let mut m = meso();
        let first = TrainConfig {
            epochs: vec![1],
            checkpoint_dir: Some(dir.path().into()),
            ..quick("meso4")
        };
        let out = finetune(m.as_mut(), &first, &set, &set).unwrap();
        let resume = TrainConfig {
            epochs: vec![2],
            checkpoint_in: Some(out.saved[0].1.clone()),
            ..quick("meso4")
        };
        let mut fresh = meso();
        let out2 = finetune(fresh.as_mut(), &resume, &set, &set).unwrap();
        assert_eq!(out2.checkpoint.epoch, 2);
        assert_eq!(out2.checkpoint.history.len(), 2);
        assert_eq!(out2.checkpoint.optimizer.as_ref().unwrap().step, 2);
    }

    #[test]
    fn divergence_returns_last_good_state() {
        let set = blob_set(4, 64, 4);
        let mut m = meso();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: vec![3],
            ..quick("meso4")
        };
        match finetune(m.as_mut(), &cfg, &set, &set) {
            Err(Error::Diverged { epoch, loss, last_good }) => {
                assert!(!loss.is_finite() || loss > DIVERGENCE_THRESHOLD);
                let good = last_good.unwrap();
                assert_eq!(good.epoch, epoch - 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(0, &[1]), derive_seed(0, &[2]));
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(5, &[3]), derive_seed(5, &[3]));
    }
}
