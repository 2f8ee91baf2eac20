//! Momentum SGD with optional per-entry gradient freezing.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// v ← μ·v + g; w ← w − η·v. Velocity buffers persist across calls, keyed
/// by position in the parameter list, so callers must pass the same
/// parameters in the same order every step.
///
/// A frozen entry (mask value 0) keeps both its weight and its velocity
/// bitwise unchanged; without the velocity freeze a later mask change would
/// let stale momentum drift weights that were meant to stay fixed.
pub struct SgdOptimizer {
    lr: f64,
    momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdOptimizer {
            lr,
            momentum,
            velocities: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update using each tensor's accumulated gradient.
    /// `masks[i]`, when present, must match the i-th parameter's length;
    /// entries equal to 0.0 are frozen, everything else is trainable.
    pub fn step(&mut self, params: &mut [&mut Tensor], masks: Option<&[Option<&[f64]>]>) -> Result<()> {
        if let Some(ms) = masks {
            if ms.len() != params.len() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("{} masks for {} params", ms.len(), params.len()),
                ));
            }
            for (p, m) in params.iter().zip(ms) {
                if let Some(m) = m {
                    if m.len() != p.numel() {
                        return Err(Error::ShapeMismatch {
                            op: "sgd_step",
                            lhs: p.shape().to_vec(),
                            rhs: vec![m.len()],
                        });
                    }
                }
            }
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocities.len() != params.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!(
                    "optimizer tracks {} params, got {}",
                    self.velocities.len(),
                    params.len()
                ),
            ));
        }
        for (i, p) in params.iter_mut().enumerate() {
            let v = &mut self.velocities[i];
            let mask = masks.and_then(|ms| ms[i]);
            let n = p.numel();
            let grad: Vec<f64> = p.grad().to_vec();
            let data = p.data_mut();
            for j in 0..n {
                if let Some(m) = mask {
                    if m[j] == 0.0 {
                        continue;
                    }
                }
                v[j] = self.momentum * v[j] + grad[j];
                data[j] -= self.lr * v[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = param(&[1.0, 2.0]);
        p.accumulate_grad(&[3.0, -4.0]);
        let mut opt = SgdOptimizer::new(0.0, 0.9);
        opt.step(&mut [&mut p], None).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_entry_is_frozen() {
        let mut p = param(&[1.0, 1.0]);
        p.accumulate_grad(&[1.0, 1.0]);
        let mut opt = SgdOptimizer::new(0.1, 0.0);
        let mask = [1.0, 0.0];
        opt.step(&mut [&mut p], Some(&[Some(&mask)])).unwrap();
        assert_eq!(p.data(), &[0.9, 1.0]);
    }

    #[test]
    fn momentum_recurrence_matches_hand_rolled() {
        let mut p = param(&[0.0]);
        let mut opt = SgdOptimizer::new(0.1, 0.9);
        let g = 2.0;
        p.accumulate_grad(&[g]);
        opt.step(&mut [&mut p], None).unwrap();
        assert!((p.data()[0] - (-0.1 * g)).abs() < 1e-15);
        p.zero_grad();
        p.accumulate_grad(&[g]);
        opt.step(&mut [&mut p], None).unwrap();
        let expect = -0.1 * g - 0.1 * (g + 0.9 * g);
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn all_zero_mask_freezes_params_and_velocity_bitwise() {
        let mut p = param(&[0.25, -1.5]);
        p.accumulate_grad(&[10.0, 10.0]);
        let before = p.data().to_vec();
        let mut opt = SgdOptimizer::new(0.5, 0.9);
        let mask = [0.0, 0.0];
        opt.step(&mut [&mut p], Some(&[Some(&mask)])).unwrap();
        assert!(p.data().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(opt.velocities[0].iter().all(|&v| v == 0.0));

        // A later unmasked step must behave as if the masked one never
        // happened to that entry.
        p.zero_grad();
        p.accumulate_grad(&[1.0, 1.0]);
        opt.step(&mut [&mut p], None).unwrap();
        assert!((p.data()[0] - (0.25 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let mut p = param(&[1.0, 2.0]);
        let mut opt = SgdOptimizer::new(0.1, 0.0);
        let mask = [1.0];
        assert!(opt.step(&mut [&mut p], Some(&[Some(&mask)])).is_err());
    }
}
