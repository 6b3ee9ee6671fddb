use std::f64::consts::PI;

use super::config::{ScheduleKind, ScheduleSpec};

/// Learning rate at optimizer step `step` (0-based position on the
/// schedule; the trainer's k-th step, counting from 1, uses `lr_at(k)`).
///
/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`. Steps past the end clamp to `min_lr`.
pub fn lr_at(sched: &ScheduleSpec, step: u64) -> f64 {
    match sched.kind {
        ScheduleKind::Constant => sched.peak_lr,
        ScheduleKind::CosineWithWarmup => {
            if step > sched.total_steps {
                log::warn!(
                    "lr_at: step {step} beyond total_steps {}, clamping to min_lr",
                    sched.total_steps
                );
                return sched.min_lr;
            }
            if step < sched.warmup_steps {
                return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
            }
            if step == sched.total_steps {
                return sched.min_lr;
            }
            let t = (step - sched.warmup_steps) as f64
                / (sched.total_steps - sched.warmup_steps) as f64;
            sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + (PI * t).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(peak: f64, min: f64, warmup: u64, total: u64) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::CosineWithWarmup,
            peak_lr: peak,
            min_lr: min,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    #[test]
    fn constant_everywhere() {
        let s = ScheduleSpec::constant(1e-6);
        for step in [0, 1, 17, 10_000] {
            assert_eq!(lr_at(&s, step), 1e-6);
        }
    }

    #[test]
    fn cosine_endpoint_is_min() {
        let s = cosine(1e-3, 1e-5, 10, 200);
        assert_eq!(lr_at(&s, 200), 1e-5);
        assert_eq!(lr_at(&s, 201), 1e-5);
    }

    #[test]
    fn cosine_midpoint() {
        let s = cosine(1e-3, 0.0, 100, 1100);
        let expect = 1e-3 * 0.5 * (1.0 + (PI * 0.5).cos());
        assert!((lr_at(&s, 600) - expect).abs() < 1e-18);
        assert!((lr_at(&s, 600) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramp() {
        let s = cosine(1e-3, 0.0, 100, 1100);
        assert_eq!(lr_at(&s, 0), 0.0);
        assert!((lr_at(&s, 50) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(&s, 100), 1e-3);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = cosine(1e-3, 1e-6, 20, 400);
        let lrs: Vec<f64> = (20..=400).map(|k| lr_at(&s, k)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
