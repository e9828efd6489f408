//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments and the step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update at learning rate `lr`.
    ///
    /// `grads` must hold a gradient for every trainable parameter and for no
    /// frozen one. Frozen parameters are never touched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradMap, lr: f64) -> Result<()> {
        for (idx, g) in grads.iter() {
            if idx >= params.len() {
                return Err(Error::Contract(format!("gradient for unknown parameter #{idx}")));
            }
            let p = params.by_index(idx);
            if p.frozen {
                return Err(Error::FreezeViolation {
                    name: p.name.clone(),
                });
            }
            if g.len() != p.value.numel() {
                return Err(Error::shape(format!(
                    "gradient for `{}` has {} values, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
            }
        }
        for (idx, p) in params.iter().enumerate() {
            if !p.frozen && grads.get(idx).is_none() {
                return Err(Error::Contract(format!(
                    "missing gradient for trainable parameter `{}`",
                    p.name
                )));
            }
        }

        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for (idx, g) in grads.iter() {
            let p = params.by_index_mut(idx);
            let n = p.value.numel();
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            let w = p.value.data_mut();
            for i in 0..n {
                w[i] -= lr * cfg.weight_decay * w[i];
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModuleTag;
    use crate::tensor::Tensor;

    fn single(value: f64, frozen: bool) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("w", ModuleTag::Dcp, Tensor::scalar(value)).unwrap();
        p.set_frozen_where(|_| frozen);
        p
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut p = single(0.0, false);
        let mut g = GradMap::new();
        g.insert(0, vec![1.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut p, &g, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let mut p = single(0.7, false);
        let mut g = GradMap::new();
        g.insert(0, vec![0.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().value.data()[0], 0.7);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // With zero gradient only the decay term moves the weight.
        let mut p = single(2.0, false);
        let mut g = GradMap::new();
        g.insert(0, vec![0.0]);
        let mut opt = AdamWState::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.get("w").unwrap().value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn gradient_for_frozen_parameter_is_rejected() {
        let mut p = single(1.0, true);
        let mut g = GradMap::new();
        g.insert(0, vec![1.0]);
        let mut opt = AdamWState::new(AdamWConfig::default());
        let err = opt.step(&mut p, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::FreezeViolation { .. }));
        assert_eq!(p.get("w").unwrap().value.data()[0].to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn frozen_parameters_untouched_over_many_steps() {
        let mut p = ModelParams::new();
        p.insert("frozen", ModuleTag::Backbone, Tensor::new([3], vec![0.1, -2.5, 3.3]).unwrap())
            .unwrap();
        p.insert("live", ModuleTag::Gfa, Tensor::new([2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        p.set_frozen_where(|p| p.tag == ModuleTag::Backbone);
        let before: Vec<u64> = p.get("frozen").unwrap().value.data().iter().map(|v| v.to_bits()).collect();
        let mut opt = AdamWState::new(AdamWConfig::default());
        for k in 0..20 {
            let mut g = GradMap::new();
            g.insert(1, vec![k as f64, -1.0]);
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        let after: Vec<u64> = p.get("frozen").unwrap().value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_ne!(p.get("live").unwrap().value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_trainable_gradient_is_rejected() {
        let mut p = single(1.0, false);
        let mut opt = AdamWState::new(AdamWConfig::default());
        assert!(matches!(
            opt.step(&mut p, &GradMap::new(), 0.1),
            Err(Error::Contract(_))
        ));
    }
}
