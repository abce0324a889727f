use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Staircase exponential decay: `start_lr · decay_rate^floor(iteration / decay_step)`,
/// where an iteration is one batch step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start_lr: f64,
    pub decay_step: u64,
    pub decay_rate: f64,
}

impl LrSchedule {
    pub fn new(start_lr: f64, decay_step: u64, decay_rate: f64) -> Result<LrSchedule> {
        let s = LrSchedule {
            start_lr,
            decay_step,
            decay_rate,
        };
        s.validate()?;
        Ok(s)
    }

    /// No decay.
    pub fn constant(lr: f64) -> Result<LrSchedule> {
        LrSchedule::new(lr, u64::MAX, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_lr > 0.0 && self.start_lr.is_finite()) {
            return Err(Error::arg(format!(
                "start learning rate {} must be positive",
                self.start_lr
            )));
        }
        if self.decay_step == 0 {
            return Err(Error::arg("decay step must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::arg(format!(
                "decay rate {} outside (0, 1]",
                self.decay_rate
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let k = iteration / self.decay_step;
        self.start_lr * self.decay_rate.powf(k as f64)
    }
}
