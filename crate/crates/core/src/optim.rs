//! Named parameter store with Adam optimizer state.
//!
//! Each forward pass binds parameters onto a fresh tape; after `backward`,
//! the tape gradients are accumulated back into the store in a fixed,
//! deterministic order. [`ParameterStore::adam_step`] then applies one
//! bias-corrected Adam update to every parameter that participated in the
//! accumulation and clears its gradient.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Param {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    /// Bias-correction step counter, incremented each time this parameter
    /// is updated.
    step: u64,
    /// Whether a gradient has been accumulated since the last Adam step.
    live: bool,
}

/// Named, shaped, differentiable parameter tensors with optimizer state.
#[derive(Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
                step: 0,
                live: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    /// Replace a parameter value (checkpoint load); shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter '{name}': stored shape {:?}, incoming {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Nudge a single element (finite-difference probing).
    pub fn nudge(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        p.value.data_mut()[index] += delta;
        Ok(())
    }

    /// Bind a parameter onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Value> {
        Ok(tape.leaf_grad(self.value(name)?.clone()))
    }

    /// Accumulate tape gradients back into the store. Every binding is
    /// marked live for the next Adam step even when the loss did not reach
    /// it (zero gradient).
    pub fn accumulate_from(&mut self, tape: &Tape, bindings: &[(String, Value)]) -> Result<()> {
        for (name, value) in bindings {
            let p = self
                .params
                .get_mut(name.as_str())
                .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
            if let Some(g) = tape.grad(*value) {
                if g.shape() != p.grad.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} for parameter '{name}' of shape {:?}",
                        g.shape(),
                        p.grad.shape()
                    )));
                }
                for (acc, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += d;
                }
            }
            p.live = true;
        }
        Ok(())
    }

    /// One bias-corrected Adam update over every live parameter; gradients
    /// are zeroed and liveness cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.params.values().any(|p| p.live) {
            return Err(Error::Contract(
                "adam_step without accumulated gradients".into(),
            ));
        }
        for p in self.params.values_mut() {
            if !p.live {
                continue;
            }
            p.step += 1;
            let bc1 = 1.0 - math::powf(cfg.beta1, p.step as f64);
            let bc2 = 1.0 - math::powf(cfg.beta2, p.step as f64);
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -=
                    cfg.learning_rate * m_hat / (math::sqrt(v_hat) + cfg.epsilon);
            }
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
            p.live = false;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
            p.live = false;
        }
    }

    /// Snapshot of (name, tensor) pairs in name order (checkpointing).
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store_with(name: &str, values: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::vector(values));
        s
    }

    fn accumulate(store: &mut ParameterStore, name: &str, grad: Vec<f64>) {
        let mut tape = Tape::new();
        let v = store.bind(&mut tape, name).unwrap();
        let g = tape.leaf(Tensor::vector(grad));
        let prod = tape.mul(v, g).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        store
            .accumulate_from(&tape, &[(name.into(), v)])
            .unwrap();
    }

    // One step against the hand-computed Adam recurrence: with g=1 and zero
    // state, m_hat = g, v_hat = g^2, so the update is ~ -lr.
    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = store_with("w", vec![0.0]);
        accumulate(&mut store, "w", vec![1.0]);
        store.adam_step(&AdamConfig::default()).unwrap();
        let w = store.value("w").unwrap().data()[0];
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn zero_grad_leaves_parameter_unchanged() {
        let mut store = store_with("w", vec![2.5]);
        accumulate(&mut store, "w", vec![0.0]);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[2.5]);
    }

    #[test]
    fn equal_grads_give_equal_updates() {
        let mut store = store_with("a", vec![1.0]);
        store.insert("b", Tensor::vector(vec![1.0]));
        accumulate(&mut store, "a", vec![0.3]);
        accumulate(&mut store, "b", vec![0.3]);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(
            store.value("a").unwrap().data(),
            store.value("b").unwrap().data()
        );
    }

    #[test]
    fn step_without_grads_is_contract_error() {
        let mut store = store_with("w", vec![0.0]);
        assert!(matches!(
            store.adam_step(&AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_live_parameters_are_untouched() {
        let mut store = store_with("a", vec![1.0]);
        store.insert("b", Tensor::vector(vec![7.0]));
        accumulate(&mut store, "a", vec![1.0]);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value("b").unwrap().data(), &[7.0]);
    }
}
