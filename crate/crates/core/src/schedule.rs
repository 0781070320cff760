//! Global cap on per-sample radii: flat warmup, then a linear ramp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_EPS_START: f64 = 0.05;
pub const DEFAULT_EPS_END: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("eps_start must be > 0, got {0}")]
    NonPositiveStart(f64),
    #[error("eps_end {end} is below eps_start {start}")]
    EndBelowStart { start: f64, end: f64 },
    #[error("warmup {warmup} must be < total_steps {total}")]
    WarmupTooLong { warmup: u64, total: u64 },
    #[error("step {t} is past total_steps {total}")]
    PastEnd { t: u64, total: u64 },
}

/// Warmup/ramp parameters. Construct through [`RampSchedule::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    eps_start: f64,
    eps_end: f64,
    warmup: u64,
    total_steps: u64,
}

impl RampSchedule {
    pub fn new(
        eps_start: f64,
        eps_end: f64,
        warmup: u64,
        total_steps: u64,
    ) -> Result<Self, ScheduleError> {
        if !(eps_start > 0.0 && eps_start.is_finite()) {
            return Err(ScheduleError::NonPositiveStart(eps_start));
        }
        if !(eps_end >= eps_start && eps_end.is_finite()) {
            return Err(ScheduleError::EndBelowStart {
                start: eps_start,
                end: eps_end,
            });
        }
        if warmup >= total_steps {
            return Err(ScheduleError::WarmupTooLong {
                warmup,
                total: total_steps,
            });
        }
        Ok(Self {
            eps_start,
            eps_end,
            warmup,
            total_steps,
        })
    }

    /// Default warmup: a tenth of the run, rounded down.
    pub fn default_warmup(total_steps: u64) -> u64 {
        total_steps / 10
    }

    pub fn eps_start(&self) -> f64 {
        self.eps_start
    }

    pub fn eps_end(&self) -> f64 {
        self.eps_end
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn cap_at(&self, t: u64) -> Result<f64, ScheduleError> {
        if t > self.total_steps {
            return Err(ScheduleError::PastEnd {
                t,
                total: self.total_steps,
            });
        }
        if t < self.warmup {
            return Ok(self.eps_start);
        }
        if t == self.total_steps {
            return Ok(self.eps_end);
        }
        let frac = (t - self.warmup) as f64 / (self.total_steps - self.warmup) as f64;
        let cap = self.eps_start + frac * (self.eps_end - self.eps_start);
        Ok(cap.clamp(self.eps_start, self.eps_end))
    }
}
