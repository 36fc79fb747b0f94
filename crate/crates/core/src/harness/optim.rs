use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} past schedule end {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * progress).cos()))
}

/// Floor of the default schedule.
pub fn default_lr_min(lr0: f64) -> f64 {
    lr0 / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_config(store, AdamConfig::default())
    }

    pub fn with_config(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients held in `params`; decoupled weight
/// decay `p ← p − lr·wd·p` is applied first. Missing gradients count as zero.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != state.m.len()
        || tensors
            .iter()
            .zip(&state.m)
            .any(|(t, m)| t.numel() != m.len())
    {
        return Err(Error::Config(
            "optimizer state does not match parameters".into(),
        ));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for ((t, m), v) in tensors.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = t.grad().map(<[f64]>::to_vec);
        let data = t.data_mut();
        let decay = 1.0 - lr * weight_decay;
        for (j, p) in data.iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            *p *= decay;
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_examples() {
        assert_eq!(cosine_lr(0, 1000, 3e-5, 3e-7).unwrap(), 3e-5);
        assert!((cosine_lr(1000, 1000, 3e-5, 3e-7).unwrap() - 3e-7).abs() < 1e-20);
        assert!((cosine_lr(500, 1000, 3e-5, 3e-7).unwrap() - (3e-5 + 3e-7) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(1001, 1000, 3e-5, 3e-7).is_err());
        assert_eq!(default_lr_min(3e-5), 3e-7);
    }

    fn store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full([3], value));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(0.7);
        let mut st = AdamState::new(&s);
        s.tensors_mut()[0].set_grad(vec![0.0; 3]).unwrap();
        for _ in 0..10 {
            adam_step(&mut s, &mut st, 1e-2, 0.0).unwrap();
        }
        assert_eq!(s.tensors()[0].data(), &[0.7; 3]);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let mut s = store(2.0);
        let mut st = AdamState::new(&s);
        for _ in 0..3 {
            adam_step(&mut s, &mut st, 0.1, 0.5).unwrap();
        }
        let expected = 2.0 * 0.95f64.powi(3);
        assert!(s.tensors()[0]
            .data()
            .iter()
            .all(|&p| (p - expected).abs() < 1e-15));
    }
}
