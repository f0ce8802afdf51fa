//! Per-step learning rate, weight decay and teacher temperature.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_t: f64,
}

/// Cosine interpolation from `from` (t=0) to `to` (t=1).
fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + 0.5 * (from - to) * (1.0 + (PI * t).cos())
}

impl Schedule {
    pub fn new(
        steps_per_epoch: u64,
        epochs: u64,
        warmup_epochs: u64,
        peak_lr: f64,
        min_lr: f64,
        wd: (f64, f64),
        tau_t: (f64, f64),
    ) -> Result<Self> {
        if steps_per_epoch == 0 || epochs == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if warmup_epochs > epochs {
            return Err(Error::Parameter(format!("{warmup_epochs} warmup epochs exceed {epochs} epochs")));
        }
        Ok(Self {
            steps_per_epoch,
            total_steps: steps_per_epoch * epochs,
            warmup_steps: steps_per_epoch * warmup_epochs,
            peak_lr,
            min_lr,
            wd_start: wd.0,
            wd_end: wd.1,
            tau_t_start: tau_t.0,
            tau_t_end: tau_t.1,
        })
    }

    /// Linear warmup from 0, then cosine decay reaching `min_lr` on the final step.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let n = self.total_steps - self.warmup_steps;
        if n <= 1 {
            return self.min_lr;
        }
        let t = ((step - self.warmup_steps) as f64 / (n - 1) as f64).min(1.0);
        cosine(self.peak_lr, self.min_lr, t)
    }

    pub fn weight_decay(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.wd_start;
        }
        let t = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        cosine(self.wd_start, self.wd_end, t)
    }

    /// Linear within each epoch, resetting at every epoch start.
    pub fn tau_t(&self, step: u64) -> f64 {
        let i = step % self.steps_per_epoch;
        if self.steps_per_epoch == 1 {
            return self.tau_t_start;
        }
        let t = i as f64 / (self.steps_per_epoch - 1) as f64;
        self.tau_t_start + (self.tau_t_end - self.tau_t_start) * t
    }

    pub fn at(&self, step: u64) -> ScheduleValues {
        ScheduleValues {
            lr: self.lr(step),
            weight_decay: self.weight_decay(step),
            tau_t: self.tau_t(step),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule::new(10, 30, 2, 5e-4, 1e-6, (0.04, 0.4), (0.055, 0.01)).unwrap()
    }

    #[test]
    fn warmup_starts_at_zero_and_cosine_ends_at_floor() {
        let s = sched();
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(20) - 5e-4).abs() < 1e-18);
        assert!((s.lr(299) - 1e-6).abs() < 1e-15);
        for step in 20..299 {
            assert!(s.lr(step + 1) <= s.lr(step));
        }
    }

    #[test]
    fn weight_decay_runs_from_start_to_end() {
        let s = sched();
        assert!((s.weight_decay(0) - 0.04).abs() < 1e-15);
        assert!((s.weight_decay(299) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn teacher_temperature_resets_every_epoch() {
        let s = sched();
        for epoch in 0..3 {
            let start = epoch * 10;
            assert!((s.tau_t(start) - 0.055).abs() < 1e-15);
            assert!((s.tau_t(start + 9) - 0.01).abs() < 1e-15);
            for i in 0..10 {
                let t = s.tau_t(start + i);
                assert!((0.01 - 1e-15..=0.055 + 1e-15).contains(&t));
            }
        }
    }

    #[test]
    fn rejects_empty_schedules() {
        assert!(Schedule::new(0, 1, 0, 1.0, 0.0, (0.0, 0.0), (0.05, 0.01)).is_err());
        assert!(Schedule::new(1, 1, 2, 1.0, 0.0, (0.0, 0.0), (0.05, 0.01)).is_err());
    }
}
