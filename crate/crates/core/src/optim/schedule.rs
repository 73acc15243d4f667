use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    CosineRestarts,
}

/// Per-optimizer-step learning rate with no warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub cycles: usize,
}

impl Schedule {
    /// `lr_max · (1 − step/total)`
    pub fn linear(lr_max: f64, total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, lr_max, 0.0, total_steps, 1)
    }

    /// Half-cosine from `lr_max` to `lr_min` within each of `cycles` equal
    /// cycles; when `total_steps` is not divisible the last cycle is longer.
    pub fn cosine_restarts(lr_max: f64, lr_min: f64, total_steps: usize, cycles: usize) -> Result<Self> {
        Self::new(ScheduleKind::CosineRestarts, lr_max, lr_min, total_steps, cycles)
    }

    pub fn new(kind: ScheduleKind, lr_max: f64, lr_min: f64, total_steps: usize, cycles: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if kind == ScheduleKind::CosineRestarts && (cycles == 0 || cycles > total_steps) {
            return Err(Error::InvalidArgument(format!(
                "cycles {cycles} must be in 1..={total_steps}"
            )));
        }
        if !(lr_max.is_finite() && lr_min.is_finite() && lr_max >= 0.0 && lr_min >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be finite and non-negative (max {lr_max}, min {lr_min})"
            )));
        }
        Ok(Schedule {
            kind,
            lr_max,
            lr_min,
            total_steps,
            cycles,
        })
    }

    /// Nominal cycle length `T = total_steps / cycles` (floor).
    pub fn cycle_len(&self) -> usize {
        self.total_steps / self.cycles.max(1)
    }

    /// Position within the current cycle and that cycle's length.
    fn cycle_position(&self, step: usize) -> (usize, usize) {
        let t = self.cycle_len();
        let k = (step / t).min(self.cycles - 1);
        let period = if k + 1 == self.cycles {
            self.total_steps - k * t
        } else {
            t
        };
        let c = step - k * t;
        // step == total_steps wraps to the start of a new cycle
        if c >= period {
            (c - period, period)
        } else {
            (c, period)
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Linear => self.lr_max * (1.0 - step as f64 / self.total_steps as f64),
            ScheduleKind::CosineRestarts => {
                let (c, period) = self.cycle_position(step);
                if c == 0 {
                    self.lr_max
                } else {
                    self.lr_min
                        + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * c as f64 / period as f64).cos())
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_midpoint_and_ends() {
        let s = Schedule::linear(2e-5, 100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 2e-5);
        assert!((s.lr_at(50).unwrap() - 1e-5).abs() < 1e-20);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn cosine_cycle_midpoint_and_restart() {
        let s = Schedule::cosine_restarts(2e-5, 0.0, 100, 5).unwrap();
        assert!((s.lr_at(10).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(20).unwrap(), 2e-5);
        assert_eq!(s.lr_at(0).unwrap(), 2e-5);
        assert_eq!(s.lr_at(100).unwrap(), 2e-5);
    }

    #[test]
    fn cosine_remainder_goes_to_last_cycle() {
        let s = Schedule::cosine_restarts(1.0, 0.0, 23, 5).unwrap();
        assert_eq!(s.cycle_len(), 4);
        for k in 0..5 {
            assert_eq!(s.lr_at(4 * k).unwrap(), 1.0);
        }
        // last cycle spans steps 16..23 (7 steps); step 20 is not a restart
        assert!(s.lr_at(20).unwrap() < 1.0);
        let mid = s.lr_at(16 + 3).unwrap();
        assert!((mid - 0.5 * (1.0 + (PI * 3.0 / 7.0).cos())).abs() < 1e-15);
    }

    #[test]
    fn cosine_stays_within_bounds_with_nonzero_floor() {
        let s = Schedule::cosine_restarts(1e-3, 1e-5, 1000, 8).unwrap();
        for step in 0..=1000 {
            let lr = s.lr_at(step).unwrap();
            assert!((1e-5..=1e-3).contains(&lr));
        }
        let t = s.cycle_len();
        let near_end = s.lr_at(t - 1).unwrap();
        assert!(near_end - 1e-5 < 1e-6);
    }

    #[test]
    fn invalid_schedules() {
        assert!(Schedule::linear(1.0, 0).is_err());
        assert!(Schedule::cosine_restarts(1.0, 0.0, 10, 0).is_err());
        assert!(Schedule::cosine_restarts(1.0, 0.0, 3, 5).is_err());
    }
}
