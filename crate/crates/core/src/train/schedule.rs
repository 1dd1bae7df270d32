//! Reduce-on-plateau learning rate and early stopping on one monitored value.

use serde::{Deserialize, Serialize};

use crate::train::TrainConfig;

/// Bookkeeping shared by the plateau schedule and early stopping.
///
/// A value improves when it is below `best - min_delta`. Both counters reset
/// on improvement; the plateau counter also resets after every reduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauMonitor {
    pub best: Option<f64>,
    pub plateau_wait: usize,
    pub stop_wait: usize,
    pub lr: f64,
    pub reductions: usize,
}

/// Outcome of feeding one epoch's value to the monitor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorStep {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
}

impl PlateauMonitor {
    pub fn new(initial_lr: f64) -> Self {
        PlateauMonitor { best: None, plateau_wait: 0, stop_wait: 0, lr: initial_lr, reductions: 0 }
    }

    pub fn update(&mut self, value: f64, config: &TrainConfig) -> MonitorStep {
        let improved = match self.best {
            None => true,
            Some(b) => value < b - config.min_delta,
        };
        let mut reduced = false;
        if improved {
            self.best = Some(value);
            self.plateau_wait = 0;
            self.stop_wait = 0;
        } else {
            self.plateau_wait += 1;
            self.stop_wait += 1;
            if self.plateau_wait >= config.plateau_patience {
                self.lr *= config.plateau_factor;
                self.reductions += 1;
                self.plateau_wait = 0;
                reduced = true;
            }
        }
        MonitorStep { improved, reduced, stop: self.stop_wait >= config.early_stop_patience, lr: self.lr }
    }
}

fn replay(history: &[f64], config: &TrainConfig) -> (PlateauMonitor, bool) {
    let mut m = PlateauMonitor::new(config.learning_rate);
    let mut stop = false;
    for &v in history {
        stop = m.update(v, config).stop;
    }
    (m, stop)
}

/// Learning rate in effect after the monitored `history`.
pub fn plateau_update(history: &[f64], config: &TrainConfig) -> f64 {
    replay(history, config).0.lr
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

pub fn early_stop_check(history: &[f64], config: &TrainConfig) -> StopDecision {
    if replay(history, config).1 {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}
