//! Adam with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::model::Param;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// One update. Weight decay multiplies by `1 − lr·wd` and skips parameters marked no-decay.
    pub fn update(&mut self, params: &mut [Param], grads: &[Vec<f64>], lr: f64, wd: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != m.len() {
                return Err(Error::Dimension(format!("gradient for `{}` has the wrong length", p.name)));
            }
            let decay = if p.decay { 1.0 - lr * wd } else { 1.0 };
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(v: f64, decay: bool) -> Param {
        Param {
            name: "p".into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
            decay,
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = vec![param(1.0, false)];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8);
        opt.update(&mut ps, &[vec![0.3]], 0.01, 0.0).unwrap();
        assert!((ps[0].value.data()[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_only_on_marked_params() {
        let mut ps = vec![param(2.0, true), param(2.0, false)];
        let mut opt = AdamW::new(&ps, 0.9, 0.999, 1e-8);
        opt.update(&mut ps, &[vec![0.0], vec![0.0]], 0.1, 0.5).unwrap();
        assert!((ps[0].value.data()[0] - 2.0 * 0.95).abs() < 1e-15);
        assert_eq!(ps[1].value.data()[0], 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        clip_grad_norm(&mut g, 1.0);
        let n = (g[0][0] * g[0][0] + g[1][0] * g[1][0]).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
