use serde::{Deserialize, Serialize};

/// Linear warm-up followed by half-cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub cycle_length: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 5e-5,
            warmup_steps: 200,
            cycle_length: 10_000_000,
        }
    }
}

impl LrSchedule {
    pub fn lr_at_step(&self, step: u64) -> f64 {
        lr_at_step(self, step)
    }
}

pub fn lr_at_step(s: &LrSchedule, step: u64) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / s.cycle_length.max(1) as f64;
    let lr = s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramp_and_peak() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at_step(0), 0.0);
        assert_eq!(s.lr_at_step(200), 5e-5);
        assert!((s.lr_at_step(100) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        let s = LrSchedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            cycle_length: 1000,
        };
        assert!((s.lr_at_step(10 + 500) - 0.5).abs() < 1e-12);
        assert!(s.lr_at_step(10 + 1000).abs() < 1e-12);
        assert!(s.lr_at_step(10 + 1500) >= 0.0);
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = LrSchedule {
            peak_lr: 3.0,
            warmup_steps: 0,
            cycle_length: 100,
        };
        assert_eq!(s.lr_at_step(0), 3.0);
    }
}
