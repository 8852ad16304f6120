use std::collections::HashMap;

use super::{ModelParams, NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-7 }
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: HashMap<String, Tensor>,
    second: HashMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to the trainable entries of `params`. Frozen
    /// entries are never touched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &HashMap<String, Tensor>) -> Result<()> {
        for name in params.trainable_names() {
            let g = grads.get(&name).ok_or_else(|| NnError::MissingGradient(name.clone()))?;
            if g.shape() != params.get(&name).expect("listed").shape() {
                return Err(NnError::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for name in params.trainable_names() {
            let g = &grads[&name];
            let theta = params.get_mut(&name).expect("listed");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((t, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *t -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("theta", Tensor::scalar(v)).unwrap();
        p
    }

    fn grad(v: f64) -> HashMap<String, Tensor> {
        HashMap::from([("theta".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is lr / (1 + eps).
        let mut p = single(1.0);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut p, &grad(1.0)).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-7);
        assert!((p.get("theta").unwrap().item() - expected).abs() < 1e-15);
        assert!((p.get("theta").unwrap().item() - 0.9990000001).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_only_advances_counter() {
        let mut p = single(0.5);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 0.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn frozen_and_missing() {
        let mut p = single(0.5);
        p.set_all_trainable(false);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut p, &grad(3.0)).unwrap();
        assert_eq!(p.get("theta").unwrap().item(), 0.5);
        p.set_all_trainable(true);
        assert!(matches!(opt.step(&mut p, &HashMap::new()), Err(NnError::MissingGradient(_))));
    }
}
