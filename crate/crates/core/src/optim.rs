//! Adam with bias correction, per-epoch exponential learning-rate decay, and
//! global-norm gradient clipping.

use crate::tape::TapeError;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {index} has no gradient")]
    MissingGrad { index: usize },
    #[error("optimizer state for parameter {index} has {state} elements, parameter has {param}")]
    StateShape {
        index: usize,
        state: usize,
        param: usize,
    },
    #[error("max_norm must be positive, got {0}")]
    BadMaxNorm(f64),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the applied factor; exactly 1.0 (and the gradients untouched)
/// when the norm is already within bounds.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> Result<f64, OptimError> {
    if max_norm <= 0.0 {
        return Err(OptimError::BadMaxNorm(max_norm));
    }
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().ok_or(OptimError::MissingGrad { index: i })?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for p in params.iter_mut() {
        if let Some(g) = p.grad_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
    Ok(factor)
}

/// Global L2 norm of the currently stored gradients.
pub fn global_grad_norm(params: &[&mut Tensor]) -> Result<f64, OptimError> {
    let mut sq = 0.0;
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().ok_or(OptimError::MissingGrad { index: i })?;
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// Adam optimizer state: first/second moment buffers per parameter, the step
/// counter, and the decaying learning rate.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
}

impl AdamState {
    pub fn new(lr: f64, decay_rate: f64) -> Self {
        AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate,
        }
    }

    /// Apply one bias-corrected Adam update; gradients are consumed (cleared)
    /// afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), OptimError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(OptimError::StateShape {
                index: self.m.len().min(params.len()),
                state: self.m.len(),
                param: params.len(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(OptimError::StateShape {
                    index: i,
                    state: self.m[i].len(),
                    param: p.numel(),
                });
            }
            if p.grad().is_none() {
                return Err(OptimError::MissingGrad { index: i });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for j in 0..g.len() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[j];
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.clear_grad();
        }
        Ok(())
    }

    /// Exponential per-epoch decay: `lr <- lr * decay_rate`.
    pub fn decay_epoch(&mut self) {
        self.lr *= self.decay_rate;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let n = data.len();
        let mut t = Tensor::new(vec![n], data).unwrap().with_requires_grad();
        t.set_grad(grad).unwrap();
        t
    }

    #[test]
    fn clip_under_threshold_is_identity() {
        let mut t = with_grad(vec![1.0, 1.0], vec![0.3, 0.4]);
        let factor = clip_grad_norm(&mut [&mut t], 1.0).unwrap();
        assert_eq!(factor, 1.0);
        assert_eq!(t.grad().unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_scales_to_unit_norm() {
        let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        t.set_grad(vec![3.0, 4.0]).unwrap();
        let factor = clip_grad_norm(&mut [&mut t], 1.0).unwrap();
        assert!((factor - 0.2).abs() < 1e-15);
        let g = t.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_zero_gradients() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        t.set_grad(vec![0.0; 3]).unwrap();
        let factor = clip_grad_norm(&mut [&mut t], 1.0).unwrap();
        assert_eq!(factor, 1.0);
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn clip_requires_gradients() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            clip_grad_norm(&mut [&mut t], 1.0),
            Err(OptimError::MissingGrad { index: 0 })
        ));
    }

    #[test]
    fn clip_is_idempotent() {
        let mut t = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        t.set_grad(vec![5.0, -2.0, 1.0, 7.0]).unwrap();
        clip_grad_norm(&mut [&mut t], 1.0).unwrap();
        let once = t.grad().unwrap().to_vec();
        clip_grad_norm(&mut [&mut t], 1.0).unwrap();
        assert_eq!(t.grad().unwrap(), &once[..]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // w = 1, grad = 2 (from w^2), lr = 0.1: the bias-corrected first step
        // is lr * g / (|g| + eps) ~= lr, so w ~= 0.9.
        let mut w = with_grad(vec![1.0], vec![2.0]);
        let mut adam = AdamState::new(0.1, 1.0);
        adam.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-8, "got {}", w.data()[0]);
        assert_eq!(adam.t, 1);
        assert!(w.grad().is_none(), "gradients are cleared after the step");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = with_grad(vec![1.5, -0.5], vec![0.0, 0.0]);
        let mut adam = AdamState::new(0.1, 1.0);
        adam.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - 1.5).abs() < 1e-12);
        assert!((w.data()[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // Oracle: an independently coded scalar Adam recurrence on
        // f(w) = (w - 3)^2 from w0 = 0 with lr = 0.1.
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200u32 {
            let g = 2.0 * (w_ref - 3.0);
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t as i32));
            let v_hat = v / (1.0 - beta2.powi(t as i32));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((w_ref - 3.0).abs() < 0.05, "oracle diverged: {w_ref}");

        let mut w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut adam = AdamState::new(lr, 1.0);
        for _ in 0..200 {
            let g = 2.0 * (w.data()[0] - 3.0);
            w.set_grad(vec![g]).unwrap();
            adam.step(&mut [&mut w]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "got {}", w.data()[0]);
        assert!((w.data()[0] - w_ref).abs() < 1e-12, "must match the oracle");
    }

    #[test]
    fn state_shape_mismatch_detected() {
        let mut w = with_grad(vec![0.0], vec![1.0]);
        let mut adam = AdamState::new(0.1, 1.0);
        adam.step(&mut [&mut w]).unwrap();
        let mut w2 = with_grad(vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!(matches!(
            adam.step(&mut [&mut w2]),
            Err(OptimError::StateShape { .. })
        ));
    }

    #[test]
    fn decay_shrinks_lr() {
        let mut adam = AdamState::new(1e-4, 0.98);
        adam.decay_epoch();
        assert!((adam.lr - 9.8e-5).abs() < 1e-18);
    }
}
