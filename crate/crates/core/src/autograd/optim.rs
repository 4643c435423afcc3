use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamSet, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update using each parameter's accumulated gradient.
///
/// Decay is decoupled from the adaptive step:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
/// Parameters without a gradient are only decayed.
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<(), TensorError> {
    for (name, p) in params.iter() {
        for buffers in [&state.first, &state.second] {
            if let Some(b) = buffers.get(name) {
                if b.len() != p.numel() {
                    return Err(TensorError::StateMismatch {
                        name: name.clone(),
                        state: b.len(),
                        param: p.numel(),
                    });
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let data = p.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] = data[i] * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Tensor};

    fn scalar_param(p: f64, grad: f64) -> ParamSet {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::vector(vec![p]));
        let mut g = Graph::new();
        let v = g.param(&params, "p").unwrap();
        let l = g.scale(v, grad).unwrap();
        let l = g.sum(l, None).unwrap();
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut params, 1.0).unwrap();
        params
    }

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = scalar_param(1.0, 1.0);
        let mut state = AdamWState::default();
        adamw_step(&mut params, &mut state, &cfg(0.1, 0.0)).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps).
        let p = params.get("p").unwrap().data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decay_only_step() {
        let mut params = scalar_param(1.0, 0.0);
        let mut state = AdamWState::default();
        adamw_step(&mut params, &mut state, &cfg(0.1, 0.1)).unwrap();
        assert!((params.get("p").unwrap().data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut params = scalar_param(0.3, -0.7);
            let mut state = AdamWState::default();
            for _ in 0..5 {
                adamw_step(&mut params, &mut state, &cfg(0.01, 0.01)).unwrap();
            }
            params.get("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut params = scalar_param(1.0, 1.0);
        let mut state = AdamWState::default();
        state.first.insert("p".into(), vec![0.0; 3]);
        assert!(matches!(
            adamw_step(&mut params, &mut state, &cfg(0.1, 0.0)),
            Err(TensorError::StateMismatch { .. })
        ));
        assert_eq!(state.step, 0);
    }
}
