//! Adam optimizer with bias correction.

use crate::error::{AutodiffError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments for one [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParameterStore) -> Self {
        let zeros = |p: &ParameterStore| (0..p.len()).map(|i| Tensor::zeros(p.value(i).shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held by `params`.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<()> {
        for i in 0..params.len() {
            if params.grad(i).is_none() {
                return Err(AutodiffError::MissingGrad(params.names()[i].clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = params.grad(i).expect("checked above").data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.value_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        params.bump_version();
        Ok(())
    }

    /// Moments as a parameter store (`m.<name>`, `v.<name>`, `step`) for
    /// checkpointing.
    pub fn state_store(&self, params: &ParameterStore) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        s.insert("step", Tensor::scalar(self.step as f64))?;
        for (i, name) in params.names().iter().enumerate() {
            s.insert(format!("m.{}", name), self.m[i].clone())?;
            s.insert(format!("v.{}", name), self.v[i].clone())?;
        }
        Ok(s)
    }

    pub fn from_state_store(config: AdamConfig, params: &ParameterStore, state: &ParameterStore) -> Result<Self> {
        let step = state.get("step")?.item() as u64;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for name in params.names() {
            m.push(state.get(&format!("m.{}", name))?.clone());
            v.push(state.get(&format!("v.{}", name))?.clone());
        }
        Ok(Self { config, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParameterStore {
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::from_vec(vals.to_vec())).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        p.set_grad(0, Tensor::zeros(&[3]));
        opt.step(&mut p).unwrap();
        assert_eq!(p.value(0).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2, mhat = g, vhat = g^2,
        // update = -lr * g / (|g| + eps)
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let g = [0.5, -2.0, 1e-3];
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(cfg, &p);
        p.set_grad(0, Tensor::from_vec(g.to_vec()));
        opt.step(&mut p).unwrap();
        for (w, gi) in p.value(0).data().iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{} vs {}", w, expected);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = store(&[1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(matches!(opt.step(&mut p), Err(AutodiffError::MissingGrad(_))));
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 5e-5);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut p = store(&[0.3, -0.1]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        p.set_grad(0, Tensor::from_vec(vec![0.2, 0.4]));
        opt.step(&mut p).unwrap();
        let st = opt.state_store(&p).unwrap();
        let mut opt2 = Adam::from_state_store(opt.config, &p, &st).unwrap();
        let mut p2 = p.clone();
        opt.step(&mut p).unwrap();
        opt2.step(&mut p2).unwrap();
        assert_eq!(p.value(0), p2.value(0));
    }
}
