//! Adam optimizer with per-tensor first/second moment state keyed by tensor
//! name. No weight decay, no learning-rate schedule; bias correction uses a
//! per-tensor step count so every tensor is self-contained.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Update hyperparameters. Defaults follow the common Adam setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone)]
struct TensorState {
    step: u64,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// Stateful Adam. Call [`Adam::update`] once per tensor per optimization
/// step; state is created lazily on first sight of a name.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, TensorState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Apply one Adam update to `value` in place.
    pub fn update(&mut self, name: &str, value: &mut Array2<f64>, grad: &Array2<f64>) {
        assert_eq!(value.dim(), grad.dim(), "gradient shape mismatch for {name}");
        let entry = self.state.entry(name.to_string()).or_insert_with(|| TensorState {
            step: 0,
            m: Array2::zeros(value.dim()),
            v: Array2::zeros(value.dim()),
        });
        assert_eq!(entry.m.dim(), value.dim(), "optimizer state shape mismatch for {name}");
        entry.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bias1 = 1.0 - beta1.powi(entry.step as i32);
        let bias2 = 1.0 - beta2.powi(entry.step as i32);
        for ((w, g), (m, v)) in value
            .iter_mut()
            .zip(grad.iter())
            .zip(entry.m.iter_mut().zip(entry.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn config(lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, ..AdamConfig::default() }
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With a single update, bias correction cancels exactly:
        // m_hat = g, v_hat = g^2, so the step is -lr * g / (|g| + eps).
        let mut adam = Adam::new(config(0.1));
        let mut w = array![[0.0, 1.0]];
        let g = array![[2.0, -3.0]];
        adam.update("w", &mut w, &g);
        let expect0 = -0.1 * 2.0 / (2.0 + 1e-8);
        let expect1 = 1.0 + 0.1 * 3.0 / (3.0 + 1e-8);
        assert!((w[[0, 0]] - expect0).abs() < 1e-12);
        assert!((w[[0, 1]] - expect1).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_accumulates_linearly() {
        // Under a constant gradient, m_hat and v_hat stay g and g^2 at every
        // step, so k steps move the weight k times the first-step distance.
        let mut adam = Adam::new(config(0.01));
        let g = array![[4.0]];
        let mut w = array![[0.0]];
        for _ in 0..10 {
            adam.update("w", &mut w, &g);
        }
        let per_step = 0.01 * 4.0 / (4.0 + 1e-8);
        assert!((w[[0, 0]] + 10.0 * per_step).abs() < 1e-9);
    }

    #[test]
    fn updates_oppose_the_gradient() {
        let mut adam = Adam::new(config(1e-3));
        let mut w = array![[0.5, -0.5, 0.25]];
        let before = w.clone();
        let g = array![[1.0, -2.0, 0.5]];
        adam.update("w", &mut w, &g);
        for i in 0..3 {
            let delta = w[[0, i]] - before[[0, i]];
            assert!(delta * g[[0, i]] < 0.0, "step must descend");
            assert!(delta.abs() <= 1e-3 * 1.0001, "first step is bounded by lr");
        }
    }

    #[test]
    fn state_is_per_tensor() {
        let mut adam = Adam::new(config(0.1));
        let mut a = array![[0.0]];
        let mut b = array![[0.0]];
        // Warm up tensor `a` only; `b`'s first update must still match the
        // first-step closed form.
        for _ in 0..5 {
            adam.update("a", &mut a, &array![[1.0]]);
        }
        adam.update("b", &mut b, &array![[2.0]]);
        let expect = -0.1 * 2.0 / (2.0 + 1e-8);
        assert!((b[[0, 0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut adam = Adam::new(config(0.05));
            let mut w = array![[0.3, -0.7], [0.1, 0.9]];
            for k in 0..20 {
                let g = array![
                    [(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()],
                    [0.5 - k as f64 * 0.01, -0.25]
                ];
                adam.update("w", &mut w, &g);
            }
            w
        };
        assert_eq!(run(), run());
    }
}
