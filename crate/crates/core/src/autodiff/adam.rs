//! Adam optimizer with bias correction and global-norm gradient clipping.

use super::{GradBundle, ParamSet};

/// Adam hyperparameters. The learning-rate default follows the training
/// recipe used throughout the experiments (0.005).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one slot per parameter scalar.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let shapes: Vec<usize> = params.iter().map(|(_, e)| e.values.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn sgd_adam_step(
    params: &mut ParamSet,
    grads: &GradBundle,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let ids: Vec<usize> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id];
        let v = &mut state.v[id];
        let p = params.values_mut(id);
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Scales gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradBundle, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamSet, usize) {
        let mut params = ParamSet::new();
        let id = params.register("x", 1, 1, vec![value]);
        (params, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut params, id) = single_param(1.5);
        let mut state = AdamState::new(&params);
        let grads = GradBundle::zeros_like(&params);
        let cfg = AdamConfig::default();
        for _ in 0..100 {
            sgd_adam_step(&mut params, &grads, &mut state, &cfg);
        }
        assert_eq!(params.values(id)[0], 1.5);
    }

    #[test]
    fn constant_gradient_step_approaches_signed_lr() {
        let (mut params, id) = single_param(0.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        // inject a constant gradient of -3.0
        let mut before = params.values(id)[0];
        for step in 0..2000 {
            let mut grads = GradBundle::zeros_like(&params);
            grads.grads[id][0] = -3.0;
            sgd_adam_step(&mut params, &grads, &mut state, &cfg);
            if step > 1000 {
                let delta = params.values(id)[0] - before;
                // step direction approaches -sign(g) * lr = +lr
                assert!((delta - cfg.lr).abs() < 1e-6, "delta {delta}");
            }
            before = params.values(id)[0];
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = sum (x_i - target_i)^2, closed-form minimum at target
        let targets = [1.0, -2.0, 0.5];
        let mut params = ParamSet::new();
        let id = params.register("x", 1, 3, vec![0.0; 3]);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        for _ in 0..5000 {
            let mut grads = GradBundle::zeros_like(&params);
            for k in 0..3 {
                grads.grads[id][k] = 2.0 * (params.values(id)[k] - targets[k]);
            }
            sgd_adam_step(&mut params, &grads, &mut state, &cfg);
        }
        for k in 0..3 {
            assert!(
                (params.values(id)[k] - targets[k]).abs() < 1e-6,
                "coordinate {k}: {} vs {}",
                params.values(id)[k],
                targets[k]
            );
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut params = ParamSet::new();
        let id = params.register("x", 1, 2, vec![0.0; 2]);
        let mut grads = GradBundle::zeros_like(&params);
        grads.grads[id][0] = 30.0;
        grads.grads[id][1] = 40.0;
        let pre = clip_global_norm(&mut grads, 10.0);
        assert!((pre - 50.0).abs() < 1e-12);
        assert!((grads.global_norm() - 10.0).abs() < 1e-12);
        assert!((grads.get(id)[0] - 6.0).abs() < 1e-12);
    }
}
