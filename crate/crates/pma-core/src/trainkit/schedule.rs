//! Learning-rate schedule: linear warmup, constant plateau, then a decay to
//! a floor. Decay is geometric by default (convex, hits both endpoints);
//! linear is available behind a flag.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub constant_until: u64,
    pub decay_until: u64,
    pub floor_lr: f64,
    pub linear_decay: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Desk scale: one tenth of the full-scale step counts.
        ScheduleConfig {
            warmup_steps: 100,
            peak_lr: 2.5e-4,
            constant_until: 1000,
            decay_until: 1500,
            floor_lr: 1e-5,
            linear_decay: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_steps <= self.constant_until
            && self.constant_until <= self.decay_until)
        {
            return Err(Error::config(format!(
                "schedule must satisfy warmup {} <= constant_until {} <= decay_until {}",
                self.warmup_steps, self.constant_until, self.decay_until
            )));
        }
        if !(self.peak_lr > self.floor_lr && self.floor_lr > 0.0) {
            return Err(Error::config(format!(
                "schedule needs peak_lr {} > floor_lr {} > 0",
                self.peak_lr, self.floor_lr
            )));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    if step < sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    if step <= sched.constant_until {
        return sched.peak_lr;
    }
    if step < sched.decay_until {
        let span = (sched.decay_until - sched.constant_until) as f64;
        let frac = (step - sched.constant_until) as f64 / span;
        if sched.linear_decay {
            return sched.peak_lr + frac * (sched.floor_lr - sched.peak_lr);
        }
        return sched.peak_lr * (sched.floor_lr / sched.peak_lr).powf(frac);
    }
    sched.floor_lr
}
