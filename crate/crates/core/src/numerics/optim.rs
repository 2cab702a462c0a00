use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let moments = params
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Moments {
                        first: vec![0.0; t.numel()],
                        second: vec![0.0; t.numel()],
                    },
                )
            })
            .collect();
        Self { moments, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }
}

/// One decoupled-weight-decay Adam update over every parameter.
pub fn adamw_step(
    params: &mut Params,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    adamw_step_filtered(params, state, lr, cfg, |_| true)
}

/// Like [`adamw_step`], but parameters rejected by `trainable` are left
/// untouched (no decay, no moment update).
pub fn adamw_step_filtered(
    params: &mut Params,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        if !state.moments.contains_key(name) {
            return Err(Error::Contract(format!("no optimizer state for {name}")));
        }
    }
    if names.len() != state.moments.len() {
        return Err(Error::Contract(
            "optimizer state does not match parameter set".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for name in &names {
        if !trainable(name) {
            continue;
        }
        let grad: Tensor = params
            .grad(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("missing gradient for {name}")))?;
        let m = state.moments.get_mut(name).expect("checked above");
        let value = params.get_mut(name).expect("name from params");
        if grad.numel() != value.numel() {
            return Err(Error::shape("adamw_step", value.shape(), grad.shape()));
        }
        for (i, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            *p -= lr * cfg.weight_decay * *p;
            m.first[i] = cfg.beta1 * m.first[i] + (1.0 - cfg.beta1) * g;
            m.second[i] = cfg.beta2 * m.second[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m.first[i] / bc1;
            let vhat = m.second[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> Params {
        let mut p = Params::new();
        p.insert("p", Tensor::scalar(value)).unwrap();
        p.grad_mut("p").unwrap().data_mut()[0] = grad;
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(0.7, 0.0);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &mut s, 0.1, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[0.7]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps).
        let mut p = single(1.0, 1.0);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &mut s, 0.1, &cfg).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((p.get("p").unwrap().data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decay_with_zero_grad() {
        let mut p = single(2.0, 0.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &mut s, 0.1, &AdamWConfig::default()).unwrap();
        assert!((p.get("p").unwrap().data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = single(1.0, 1.0);
        let mut s = OptimizerState::default();
        assert!(matches!(
            adamw_step(&mut p, &mut s, 0.1, &AdamWConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn filtered_parameters_stay_put() {
        let mut p = single(1.0, 1.0);
        let mut s = OptimizerState::new(&p);
        adamw_step_filtered(&mut p, &mut s, 0.1, &AdamWConfig::default(), |_| false).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[1.0]);
    }
}
