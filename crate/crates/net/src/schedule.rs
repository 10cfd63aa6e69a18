//! Learning rate: linear warmup to the peak, then cosine decay to the floor.

use crate::error::{NetError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step > self.total_steps || self.warmup_steps > self.total_steps {
            return Err(NetError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        let u = if span == 0 {
            1.0
        } else {
            (step - self.warmup_steps) as f64 / span as f64
        };
        Ok(self.min + (self.peak - self.min) * (1.0 + (std::f64::consts::PI * u).cos()) / 2.0)
    }
}
