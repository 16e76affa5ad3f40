//! Pieces shared by the two training loops.

use serde::{Deserialize, Serialize};

use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Context/response pairs per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 10,
            max_epochs: 15,
            patience: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss per response token, averaged over the epoch's batches.
    pub train_loss: f64,
    /// Validation loss per response token after the epoch.
    pub valid_loss: f64,
    /// Model-specific extra metrics (e.g. the focus model's response NLL).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss on the training split before the first update.
    pub initial_train_loss: f64,
    pub initial_valid_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = the initial parameters).
    pub best_epoch: usize,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Shuffle-stream state after the last epoch.
    #[serde(skip)]
    pub rng_state: Option<crate::rng::Rng>,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug)]
pub(crate) struct EarlyStopping<T> {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    best: T,
    since_best: usize,
}

impl<T> EarlyStopping<T> {
    pub fn new(patience: usize, initial_loss: f64, initial: T) -> Self {
        Self {
            patience,
            best_loss: initial_loss,
            best_epoch: 0,
            best: initial,
            since_best: 0,
        }
    }

    /// Records an epoch; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> T) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best = snapshot();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn finish(self) -> (T, usize) {
        (self.best, self.best_epoch)
    }
}

/// Batches of indices for one epoch, in a seeded shuffled order.
pub(crate) fn epoch_batches<R: rand::Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::RngExt;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
