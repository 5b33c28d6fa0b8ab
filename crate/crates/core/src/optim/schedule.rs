use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WarmupCosine,
}

/// Learning-rate schedule. For `WarmupCosine`, α ramps linearly from 0 at
/// `t = 0` to α_max at `t = warmup_steps`, then follows a half cosine to 0 at
/// `t = total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub const CONSTANT: Schedule = Schedule {
        kind: ScheduleKind::Constant,
        warmup_steps: 0,
        total_steps: u64::MAX,
    };

    pub fn warmup_cosine(warmup_steps: u64, total_steps: u64) -> Schedule {
        Schedule {
            kind: ScheduleKind::WarmupCosine,
            warmup_steps,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.kind == ScheduleKind::WarmupCosine && self.total_steps <= self.warmup_steps {
            return Err(format!(
                "total_steps ({}) must exceed warmup_steps ({})",
                self.total_steps, self.warmup_steps
            ));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::CONSTANT
    }
}

/// Learning rate at step `t`. Steps past `total_steps` get 0.
pub fn schedule_alpha(schedule: &Schedule, alpha_max: f64, t: u64) -> f64 {
    match schedule.kind {
        ScheduleKind::Constant => alpha_max,
        ScheduleKind::WarmupCosine => {
            let (w, total) = (schedule.warmup_steps, schedule.total_steps);
            if t > total {
                0.0
            } else if t < w {
                alpha_max * t as f64 / w as f64
            } else {
                let progress = (t - w) as f64 / (total - w) as f64;
                alpha_max * 0.5 * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let s = Schedule::warmup_cosine(10, 110);
        assert_eq!(schedule_alpha(&s, 1.0, 5), 0.5);
        assert_eq!(schedule_alpha(&s, 1.0, 0), 0.0);
        assert_eq!(schedule_alpha(&s, 2.0, 10), 2.0);
    }

    #[test]
    fn cosine_midpoint_and_end() {
        let s = Schedule::warmup_cosine(10, 110);
        let mid = schedule_alpha(&s, 3.0, 60);
        let closed_form = 3.0 * (PI / 4.0).cos().powi(2);
        assert!((mid - closed_form).abs() < 1e-15);
        assert!((mid - 1.5).abs() < 1e-15);
        assert!(schedule_alpha(&s, 3.0, 110).abs() < 1e-15);
        assert_eq!(schedule_alpha(&s, 3.0, 111), 0.0);
    }

    #[test]
    fn never_negative_and_monotone_after_warmup() {
        let s = Schedule::warmup_cosine(7, 50);
        let mut prev = f64::INFINITY;
        for t in 0..=60 {
            let a = schedule_alpha(&s, 0.3, t);
            assert!(a >= 0.0);
            if t >= 7 {
                assert!(a <= prev);
                prev = a;
            }
        }
    }

    #[test]
    fn constant_and_validation() {
        assert_eq!(schedule_alpha(&Schedule::CONSTANT, 0.1, 12345), 0.1);
        assert!(Schedule::warmup_cosine(10, 10).validate().is_err());
        assert!(Schedule::warmup_cosine(0, 1).validate().is_ok());
    }
}
