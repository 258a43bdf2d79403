use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the validation metric
/// (higher is better) has failed to improve for `patience` epochs in a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler { lr, factor, patience: patience.max(1), best: None, stale: 0 }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }

    /// Learning rate after replaying a whole metric history.
    pub fn replay(lr: f64, factor: f64, patience: usize, history: &[f64]) -> f64 {
        let mut s = PlateauScheduler::new(lr, factor, patience);
        history.iter().fold(lr, |_, &m| s.step(m))
    }
}
