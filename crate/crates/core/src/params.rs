//! Named parameter storage, binding onto a tape, initialization, and Adam.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Flat, name-ordered catalog of model tensors. Names are dotted paths such
/// as `vit.block0.attn.wq`; iteration order is lexicographic, which keeps
/// checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f64> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// How a parameter enters a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindAs {
    Trainable,
    Frozen,
    Skip,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites or adds every tensor of `other`, checking shapes of
    /// overwritten entries.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (name, t) in &other.tensors {
            if let Some(existing) = self.tensors.get(name) {
                if existing.shape() != t.shape() {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: {:?} vs loaded {:?}",
                        existing.shape(),
                        t.shape()
                    )));
                }
            }
            self.tensors.insert(name.clone(), t.clone());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Pushes parameters onto `tape` according to `policy`.
    pub fn bind(&self, tape: &mut Tape<T>, policy: impl Fn(&str) -> BindAs) -> Bound {
        let mut vars = BTreeMap::new();
        let mut trainable = BTreeSet::new();
        for (name, t) in &self.tensors {
            let var = match policy(name) {
                BindAs::Skip => continue,
                BindAs::Frozen => tape.constant(t.clone()),
                BindAs::Trainable => {
                    trainable.insert(name.clone());
                    tape.param(t.clone())
                }
            };
            vars.insert(name.clone(), var);
        }
        Bound { vars, trainable }
    }

    /// Flattens every tensor (in name order) into one vector.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "unflatten: {} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            let n = t.len();
            tensors.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { tensors })
    }
}

/// Parameters bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: BTreeSet<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    /// Binds `name` to an existing tape variable, replacing any previous
    /// binding. The variable is not counted as trainable.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        let name = name.into();
        self.trainable.remove(&name);
        self.vars.insert(name, var);
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    /// Collects gradients of the trainable parameters by name.
    pub fn gradients<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.trainable
            .iter()
            .map(|name| (name.clone(), grads.wrt(self.vars[name]).clone()))
            .collect()
    }
}

/// Gaussian init with Glorot variance `2 / (fan_in + fan_out)`.
pub fn glorot<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, &[rows, cols], std)
}

pub fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
        .expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over an explicit set of parameter names.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f64> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new<S: Into<String>>(cfg: AdamConfig, names: impl IntoIterator<Item = S>) -> Self {
        Self {
            cfg,
            step: 0,
            moments: names.into_iter().map(|n| (n.into(), (Vec::new(), Vec::new()))).collect(),
        }
    }

    /// Number of parameter tensors the optimizer updates.
    pub fn num_tensors(&self) -> usize {
        self.moments.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for names outside the optimizer set are
    /// ignored; optimizer names without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.learning_rate / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (name, (m, v)) in self.moments.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let param = store
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer parameter `{name}` missing from store")))?;
            if param.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}`: {:?} vs parameter {:?}",
                    g.shape(),
                    param.shape()
                )));
            }
            if m.is_empty() {
                *m = vec![T::zero(); g.len()];
                *v = vec![T::zero(); g.len()];
            }
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
