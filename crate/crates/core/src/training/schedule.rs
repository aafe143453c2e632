//! Learning-rate and positive-margin schedules.
//!
//! The learning rate ramps linearly from 0 to `lr_peak` over
//! `warmup_steps`, then follows a half cosine down to `lr_min` at
//! `total_steps`. The positive margin `m+` rises along a half cosine from
//! its starting value to `m_plus_end` over the whole run.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub m_plus_start: f64,
    pub m_plus_end: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps ({}) < total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0 <= self.lr_min && self.lr_min < self.lr_peak) {
            return Err(Error::Config(format!(
                "need 0 <= lr_min ({}) < lr_peak ({})",
                self.lr_min, self.lr_peak
            )));
        }
        if !(self.m_plus_start <= self.m_plus_end && self.m_plus_end < 1.0) {
            return Err(Error::Config(format!(
                "need m_plus_start ({}) <= m_plus_end ({}) < 1",
                self.m_plus_start, self.m_plus_end
            )));
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, s: &ScheduleConfig) -> f64 {
    if step <= s.warmup_steps {
        return s.lr_peak * (step as f64 / s.warmup_steps as f64);
    }
    let progress = ((step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64).min(1.0);
    s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + (PI * progress).cos())
}

pub fn m_plus_at(step: usize, s: &ScheduleConfig) -> f64 {
    let progress = (step as f64 / s.total_steps as f64).min(1.0);
    s.m_plus_start + 0.5 * (s.m_plus_end - s.m_plus_start) * (1.0 - (PI * progress).cos())
}
