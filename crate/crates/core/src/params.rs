use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Named parameters with per-name frozen flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param { value, frozen: false });
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param { value, frozen: true });
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params.get(name).ok_or_else(|| config_err("param", format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.param(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| config_err("param", format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Moves every entry of `other` into `self`, keeping its frozen flags.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Copy of the entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), frozen: p.frozen }))
                .collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and values; used to prove frozen parts stay untouched.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl ParamStore<f32> {
    /// Gaussian init with the given standard deviation.
    pub fn init_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) {
        let t = Tensor::from_fn(shape, |_| (rng.normal() * std) as f32);
        self.insert(name, t);
    }

    /// Weight `[fan_in, fan_out]` with std `gain / sqrt(fan_in)`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) {
        self.init_normal(format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng);
        self.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, name: &str, width: usize) {
        self.insert(format!("{name}.g"), Tensor::full(&[width], 1.0));
        self.insert(format!("{name}.b"), Tensor::zeros(&[width]));
    }
}

/// Adam with a constant learning rate and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, moments: BTreeMap::new() }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen or unknown parameters are rejected.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for name in grads.keys() {
            if store.param(name)?.frozen {
                return Err(config_err("adam", format!("gradient for frozen parameter {name}")));
            }
        }
        let norm = grads.values().map(|g| g.sq_norm().to_f64().unwrap()).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(config_err("adam", format!("{name}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64().unwrap() * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= T::lit(upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_survive_steps() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store.init_normal("a", &[3, 3], 1.0, &mut rng);
        store.init_normal("b", &[3], 1.0, &mut rng);
        store.set_frozen("b", true);
        let frozen_before = store.subset("b").digest();
        let mut opt = Adam::new(0.1);
        let grads: BTreeMap<_, _> = [("a".to_string(), Tensor::full(&[3, 3], 1.0f32))].into();
        for _ in 0..10 {
            opt.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.subset("b").digest(), frozen_before);
        let bad: BTreeMap<_, _> = [("b".to_string(), Tensor::full(&[3], 1.0f32))].into();
        assert!(opt.step(&mut store, &bad).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(&[2], 1.0));
        let mut opt = Adam::new(0.01);
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())].into();
        opt.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[1] - 1.01).abs() < 1e-6);
    }
}
