use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments for every parameter plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameter count".into()));
        }
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::dim("adam_step", format!("moment shape for {}", p.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update with decoupled weight decay, applied to
/// trainable parameters that carry a gradient. Frozen parameters are never
/// touched, even if a gradient is attached.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    state.check(store)?;
    state.t += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let Some(grad) = &p.grad else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, g), mi), vi) in p.tensor.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, trainable: bool, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value), trainable).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(0.5, true, 1.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        // m̂ = v̂ = 1, so Δ = -lr / (1 + eps)
        let delta = s.by_name("w").unwrap().tensor.item() - 0.5;
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut s = store_with(0.5, true, 0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        assert_eq!(s.by_name("w").unwrap().tensor.item(), 0.5);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = store_with(0.5, false, 3.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut s, &mut st, 1e-1).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().tensor.item().to_bits(), 0.5f64.to_bits());
        assert_eq!(st.t, 10);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = store_with(2.0, true, 0.0);
        let mut st = AdamState::new(
            &s,
            AdamConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert!((s.by_name("w").unwrap().tensor.item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
