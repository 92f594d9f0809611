//! ADAM optimizer with bias-corrected moment estimates.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// ADAM hyperparameters. The learning rate default matches the training
/// recipe; beta/epsilon are the conventional defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    /// Initialize zeroed accumulators matching `params`.
    pub fn new(params: &[&Tensor<F>], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One ADAM update over all parameters. `params` and `grads` must be in
    /// the same order as at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape != g.shape {
                return Err(Error::Shape(format!(
                    "adam: parameter shape {:?} does not match gradient shape {:?}",
                    p.shape, g.shape
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.eps);
        let bc1 = F::from_f64(1.0 - self.config.beta1.powf(t));
        let bc2 = F::from_f64(1.0 - self.config.beta2.powf(t));
        let lr = F::from_f64(self.config.lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Raw accumulators for checkpointing.
    pub fn to_parts(&self) -> (u64, &[Vec<F>], &[Vec<F>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        AdamState { config, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        let before = p.clone();
        state.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // with constant gradient 1, bias correction makes m_hat=1, v_hat=1,
        // so the first update is lr / (1 + eps)
        let mut p = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&[&p], cfg);
        state.step(&mut [&mut p], &[g]).unwrap();
        let delta = 2.0 - p.data[0];
        assert!((delta - cfg.lr).abs() < 1e-9, "delta {delta}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        // minimize f(x) = 0.5 x^2, grad = x
        let mut p = Tensor::new(vec![1], vec![3.0f64]).unwrap();
        let mut state = AdamState::new(
            &[&p],
            AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let g = Tensor::new(vec![1], vec![p.data[0]]).unwrap();
            state.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.data[0].abs() < 1e-3, "final x = {}", p.data[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[&p], AdamConfig::default());
        assert!(state.step(&mut [&mut p], &[g]).is_err());
    }
}
