use serde::{Deserialize, Serialize};

use super::{Params, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

impl AdamConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }
}

/// Bias-corrected Adam moments for one parameter buffer.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, params: &Params<F>) -> Self {
        Self { config, m: vec![F::zero(); params.len()], v: vec![F::zero(); params.len()], step: 0 }
    }

    pub fn update(&mut self, params: &mut Params<F>, grads: &Params<F>) -> Result<()> {
        self.update_with_lr(params, grads, self.config.lr)
    }

    pub fn update_with_lr(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} values, got params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let clip = match c.max_grad_norm {
            Some(max) => {
                let n = grads.norm().to_f64().unwrap_or(f64::INFINITY);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(c.eps);
        let clip = F::of(clip);
        let p = params.as_mut_slice();
        for i in 0..p.len() {
            let g = grads.as_slice()[i] * clip;
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + eps;
            p[i] -= step_size * self.m[i] / denom;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layout;
    use std::sync::Arc;

    fn scalar_params(v: f64) -> Params<f64> {
        let mut l = Layout::default();
        l.push("x", &[1]);
        Params::from_vec(Arc::new(l), vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar_params(1.5);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.m[0] = 0.2;
        s.v[0] = 0.4;
        let g = p.zeros_like();
        s.update(&mut p, &g).unwrap();
        assert_eq!(s.step, 1);
        assert!((s.m[0] - 0.18).abs() < 1e-15);
        assert!((s.v[0] - 0.4 * 0.999).abs() < 1e-15);
        // A decayed non-zero first moment still moves the parameter; with
        // fresh moments a zero gradient must not.
        let mut q = scalar_params(1.5);
        let mut fresh = AdamState::new(AdamConfig::default(), &q);
        fresh.update(&mut q, &g).unwrap();
        assert_eq!(q.as_slice()[0], 1.5);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut p = scalar_params(0.0);
        let cfg = AdamConfig::default().with_lr(1e-3);
        let mut s = AdamState::new(cfg, &p);
        let mut g = p.zeros_like();
        g.as_mut_slice()[0] = 3.7;
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.as_slice()[0];
            s.update(&mut p, &g).unwrap();
            last = before - p.as_slice()[0];
        }
        assert!((last - 1e-3).abs() < 1e-6, "{last}");
    }

    #[test]
    fn one_dimensional_quadratic_converges() {
        // f(x) = (x - 2.5)^2
        let mut p = scalar_params(-4.0);
        let mut s = AdamState::new(AdamConfig::default().with_lr(1e-2), &p);
        let mut g = p.zeros_like();
        let mut converged_at = None;
        for step in 0..5000 {
            let x = p.as_slice()[0];
            g.as_mut_slice()[0] = 2.0 * (x - 2.5);
            s.update(&mut p, &g).unwrap();
            if (p.as_slice()[0] - 2.5).abs() < 1e-6 && converged_at.is_none() {
                converged_at = Some(step);
            }
        }
        assert!(converged_at.is_some());
        assert!((p.as_slice()[0] - 2.5).abs() < 1e-6, "{}", p.as_slice()[0]);
    }
}
