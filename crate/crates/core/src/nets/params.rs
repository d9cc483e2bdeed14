use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Named learnable tensors of one network. Names are dot-separated paths
/// such as `down0.conv1.weight`; iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParameterStore {
        let entries = self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        ParameterStore { entries }
    }

    /// Replace the value of an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.entries.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: {:?} vs {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        *slot = tensor;
        Ok(())
    }

    /// Checks that `other` carries exactly the same names and shapes.
    pub fn check_aligned(&self, other: &ParameterStore) -> Result<()> {
        for (name, t) in &self.entries {
            let o = other.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!("`{name}`: {:?} vs {:?}", t.shape(), o.shape())));
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::ShapeMismatch(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ParameterStore, factor: f64) {
        for (name, t) in &mut self.entries {
            if let Some(o) = other.get(name) {
                for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                    *a += factor * b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.entries.values_mut().for_each(|t| t.scale(factor));
    }
}

/// Builds a store with fan-in scaled Gaussian weights. Each tensor draws from
/// its own stream keyed by `(seed, name)`, so insertion order never matters.
pub(crate) struct Initializer {
    seed: u64,
    store: ParameterStore,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed, store: ParameterStore::new() }
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        self.scaled_gaussian(name, shape, fan_in, 1.0)
    }

    /// He initialization times `gain`.
    pub fn scaled_gaussian(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<()> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(name, e.to_string()))?;
        let mut r = rng::rng_named(self.seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut r)).collect();
        self.store.insert(name, Tensor::from_vec(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value))
    }

    /// `prefix.weight` of shape `(cout, cin, k, k)` and zero `prefix.bias`.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.scaled_conv(prefix, cin, cout, k, 1.0)
    }

    pub fn scaled_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Result<()> {
        self.scaled_gaussian(&format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k, gain)?;
        self.constant(&format!("{prefix}.bias"), &[cout], 0.0)
    }

    pub fn conv_transpose(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        self.gaussian(&format!("{prefix}.weight"), &[cin, cout, 2, 2], cin)?;
        self.constant(&format!("{prefix}.bias"), &[cout], 0.0)
    }

    pub fn dense(&mut self, prefix: &str, fan_in: usize, out: usize) -> Result<()> {
        self.gaussian(&format!("{prefix}.weight"), &[out, fan_in], fan_in)?;
        self.constant(&format!("{prefix}.bias"), &[out], 0.0)
    }

    pub fn finish(self) -> ParameterStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_non_finite_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(s.insert("a", Tensor::zeros(&[2])), Err(Error::DuplicateParameter(_))));
        assert!(matches!(s.insert("b", Tensor::full(&[1], f64::NAN)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = Initializer::new(3);
        a.conv("x", 2, 4, 3).unwrap();
        a.dense("y", 5, 2).unwrap();
        let mut b = Initializer::new(3);
        b.dense("y", 5, 2).unwrap();
        b.conv("x", 2, 4, 3).unwrap();
        assert_eq!(a.finish(), b.finish());
    }

    #[test]
    fn fan_in_std() {
        let mut a = Initializer::new(11);
        a.gaussian("w", &[200, 50], 50).unwrap();
        let s = a.finish();
        let d = s.get("w").unwrap().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var.sqrt() - (2.0f64 / 50.0).sqrt()).abs() < 0.01);
    }
}
