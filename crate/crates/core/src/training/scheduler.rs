use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce-on-plateau settings for a metric where higher is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 5 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor {} outside (0, 1)", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::Config("plateau patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: Option<f64>,
    /// Consecutive epochs without a strict improvement.
    pub stale: usize,
    pub reductions: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState { lr, best: None, stale: 0, reductions: 0 }
    }
}

/// Feeds one epoch's validation accuracy and returns the learning rate for
/// the next epoch. After `patience` stale epochs in a row the rate is
/// multiplied by `factor` and the count restarts.
pub fn plateau_step(state: &mut PlateauState, cfg: &PlateauConfig, val_accuracy: f64) -> f64 {
    if state.best.map_or(true, |b| val_accuracy > b) {
        state.best = Some(val_accuracy);
        state.stale = 0;
    } else {
        state.stale += 1;
        if state.stale >= cfg.patience {
            state.lr *= cfg.factor;
            state.stale = 0;
            state.reductions += 1;
        }
    }
    state.lr
}
