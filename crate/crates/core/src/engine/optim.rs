use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// One momentum SGD update: v <- momentum*v - lr*(g + wd*p); p <- p + v.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::config(format!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

/// SGD with per-parameter velocity keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies accumulated gradients to every trainable parameter.
    pub fn step(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        let cfg = self.config;
        let velocity = &mut self.velocity;
        let mut result = Ok(());
        model.visit_params_mut("", &mut |name, p| {
            if !p.trainable || result.is_err() {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            result = sgd_step(&mut p.value, &p.grad, v, &cfg);
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_step(&mut p, &[0.0, 0.0], &mut v, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &[0.5, 1.0], &mut v, &cfg).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        assert!(sgd_step(&mut p, &[0.0, 1.0], &mut v, &SgdConfig::default()).is_err());
    }

    #[test]
    fn quadratic_bowl_descends() {
        // f(p) = |p|^2, grad = 2p. Momentum 0.9 at this rate is underdamped and
        // oscillates, so the monotone check uses damped settings.
        for momentum in [0.0, 0.5] {
            let mut p = vec![3.0, -1.5, 0.7];
            let mut v = vec![0.0; 3];
            let cfg = SgdConfig {
                learning_rate: 0.01,
                momentum,
                weight_decay: 0.0,
            };
            let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
            let mut history = vec![f(&p)];
            for _ in 0..100 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
                history.push(f(&p));
            }
            for w in history[5..].windows(2) {
                assert!(w[1] < w[0], "loss rose: {} -> {}", w[0], w[1]);
            }
            assert!(history[100] < 0.2 * history[0]);
        }
    }
}
