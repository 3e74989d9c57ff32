use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::train::config::{PhaseConfig, Schedule};

/// Half-cosine from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::range("step", format!("{step} > total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * t).cos()))
}

/// Learning rate for an optimizer step under a phase config: optional linear
/// warmup, then single-cycle cosine decay or cosine with warm restarts.
pub fn lr_at(cfg: &PhaseConfig, step: usize, total_steps: usize, steps_per_epoch: usize) -> Result<f64> {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return Ok(cfg.base_lr * (step + 1) as f64 / warmup as f64);
    }
    let (s, total) = (step - warmup, total_steps.saturating_sub(warmup));
    match cfg.schedule {
        Schedule::CosineDecay => cosine_lr(s.min(total), total, cfg.base_lr, cfg.min_lr()),
        Schedule::CosineWarmRestarts => {
            let period = (cfg.restart_epochs.max(1) * steps_per_epoch).max(1);
            cosine_lr(s % period, period, cfg.base_lr, cfg.min_lr())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::Phase;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(matches!(cosine_lr(101, 100, 1.0, 0.0), Err(Error::Range { .. })));
    }

    #[test]
    fn warmup_and_restarts() {
        let mut cfg = PhaseConfig::defaults(Phase::Pretrain);
        cfg.warmup_epochs = 1;
        assert!((lr_at(&cfg, 0, 40, 10).unwrap() - cfg.base_lr / 10.0).abs() < 1e-18);
        assert_eq!(lr_at(&cfg, 10, 40, 10).unwrap(), cfg.base_lr);
        cfg.warmup_epochs = 0;
        cfg.schedule = Schedule::CosineWarmRestarts;
        cfg.restart_epochs = 2;
        assert_eq!(lr_at(&cfg, 20, 60, 10).unwrap(), cfg.base_lr);
        assert!(lr_at(&cfg, 19, 60, 10).unwrap() < lr_at(&cfg, 10, 60, 10).unwrap());
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(total in 1usize..500, base in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let min = base * frac;
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, base, min).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr >= min - 1e-15 && lr <= base + 1e-15);
                prev = lr;
            }
        }
    }
}
