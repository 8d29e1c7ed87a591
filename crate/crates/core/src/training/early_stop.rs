//! Patience-based early stopping on validation loss.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Whether the most recent update improved on the best loss.
    pub improved: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            patience,
            min_delta,
            improved: false,
        }
    }
}

/// Record one epoch's validation loss. An improvement means
/// `val_loss < best - min_delta`; `patience` epochs without one stop training.
pub fn early_stop_update(state: &mut EarlyStopState, val_loss: f64, epoch: usize) -> StopDecision {
    state.improved = val_loss < state.best_val_loss - state.min_delta;
    if state.improved {
        state.best_val_loss = val_loss;
        state.best_epoch = Some(epoch);
        state.epochs_since_improvement = 0;
    } else {
        state.epochs_since_improvement += 1;
    }
    if state.epochs_since_improvement >= state.patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}
