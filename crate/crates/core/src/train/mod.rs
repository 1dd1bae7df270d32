//! Optimization: losses, Adam, plateau schedule, early stopping, the epoch
//! loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod schedule;
pub mod session;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{early_stop_check, plateau_update, MonitorStep, PlateauMonitor, StopDecision};
pub use session::{
    argmax_classes, bce_loss, epoch_rng, evaluate, history_csv, pixel_ce_loss, predict_masks, predict_probabilities,
    write_history_csv, BestSnapshot, EpochRecord, Evaluation, Sample, Target, TrainSession, HISTORY_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    /// Stagnant epochs before the learning rate is reduced.
    pub plateau_patience: usize,
    /// Stagnant epochs before training stops.
    pub early_stop_patience: usize,
    /// Absolute decrease of validation loss that counts as improvement.
    pub min_delta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 3,
            early_stop_patience: 10,
            min_delta: 1e-4,
            batch_size: 2,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min_delta must be nonnegative, got {}", self.min_delta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        Ok(())
    }
}
