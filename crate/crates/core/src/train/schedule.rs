use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to `min_lr`, evaluated per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, min_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        let mut problems = Vec::new();
        if !(base_lr.is_finite() && base_lr > 0.0) {
            problems.push(format!("base_lr must be positive, got {base_lr}"));
        }
        if !(min_lr.is_finite() && min_lr >= 0.0 && min_lr <= base_lr) {
            problems.push(format!("min_lr must lie in [0, base_lr], got {min_lr}"));
        }
        if total_epochs == 0 {
            problems.push("total_epochs must be at least 1".to_string());
        }
        if warmup_epochs > total_epochs {
            problems.push(format!("warmup_epochs {warmup_epochs} exceeds total_epochs {total_epochs}"));
        }
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        Ok(Self { base_lr, min_lr, warmup_epochs, total_epochs })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let (w, t) = (self.warmup_epochs, self.total_epochs);
        if epoch < w {
            return Ok((epoch + 1) as f64 / w as f64 * self.base_lr);
        }
        let progress = (epoch - w) as f64 / (t - w) as f64;
        let c = libm::cos(std::f64::consts::PI * progress);
        Ok(self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_and_closed_form() {
        let s = Schedule::new(1e-3, 0.0, 10, 100).unwrap();
        assert_eq!(s.lr_at(10).unwrap(), 1e-3);
        assert!((s.lr_at(9).unwrap() - s.lr_at(10).unwrap()).abs() < 1e-12);
        assert!((s.lr_at(55).unwrap() - 0.5e-3).abs() < 1e-15);
        assert!(matches!(s.lr_at(100), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_ends_at_min() {
        let s = Schedule::new(1.0, 0.25, 0, 4).unwrap();
        let progress_one = s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + libm::cos(std::f64::consts::PI));
        assert_eq!(progress_one, 0.25);
        assert!(s.lr_at(3).unwrap() > 0.25);
    }

    #[test]
    fn non_increasing_after_warmup_and_non_negative() {
        let s = Schedule::new(2e-3, 0.0, 3, 40).unwrap();
        let lrs: Vec<f64> = (0..40).map(|e| s.lr_at(e).unwrap()).collect();
        assert!(lrs.iter().all(|&v| v >= 0.0));
        assert!(lrs[3..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_schedules_list_every_problem() {
        let err = Schedule::new(-1.0, 5.0, 9, 0).unwrap_err().to_string();
        assert!(err.contains("base_lr") && err.contains("min_lr") && err.contains("total_epochs"), "{err}");
    }
}
