//! Fine-tuning loop: Adam over shuffled mini-batches, epoch sweeps with a
//! checkpoint per listed epoch, and an append-only per-epoch log.

mod adam;
mod checkpoint;
mod finetune;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use finetune::{
    checkpoint_path, derive_seed, evaluate_epoch, finetune, EpochEval, TrainConfig, TrainOutcome, DIVERGENCE_THRESHOLD,
};

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}
