//! Named parameter storage with seeded initialisation and the momentum twin.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ops::{device, DTYPE};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// A flat map from dot-separated parameter names to trainable variables.
///
/// Cloning a store yields another handle to the same variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.lock().vars.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    /// All variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_parameters(&self) -> usize {
        self.lock().vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&self, name: String, tensor: Tensor) -> Result<Tensor> {
        let mut inner = self.lock();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let var = Var::from_tensor(&tensor)?;
        let t = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(t)
    }

    fn truncated_normal(&self, n: usize, std: f64) -> Vec<f64> {
        let mut inner = self.lock();
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n)
            .map(|_| loop {
                let x: f64 = normal.sample(&mut inner.rng);
                if x.abs() <= 2.0 * std {
                    break x;
                }
            })
            .collect()
    }

    /// Overwrites every variable of `self` with the value of the same-named
    /// variable in `other`.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in self.vars() {
            let src = other
                .get(&name)
                .ok_or_else(|| Error::Config(format!("`{name}` missing from source store")))?;
            if src.shape() != var.shape() {
                return Err(Error::Config(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    var.shape(),
                    src.shape()
                )));
            }
            var.set(&src.as_detached_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Draws a fresh u64 from the init stream, used to derive sub-seeds.
    pub fn next_seed(&self) -> u64 {
        self.lock().rng.random()
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        Scope {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Truncated normal (±2σ) with σ = 0.02.
    pub fn normal<S: Into<Shape>>(&self, shape: S, name: &str) -> Result<Tensor> {
        let shape = shape.into();
        let data = self.store.truncated_normal(shape.elem_count(), INIT_STD);
        let t = Tensor::from_vec(data, shape, &device())?;
        self.store.insert(self.path(name), t)
    }

    pub fn zeros<S: Into<Shape>>(&self, shape: S, name: &str) -> Result<Tensor> {
        self.store
            .insert(self.path(name), Tensor::zeros(shape, DTYPE, &device())?)
    }

    pub fn constant<S: Into<Shape>>(&self, shape: S, value: f64, name: &str) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DTYPE, &device())? * value)?;
        self.store.insert(self.path(name), t)
    }

    /// Registers a new variable holding a copy of `src`.
    pub fn copy_of(&self, src: &Tensor, name: &str) -> Result<Tensor> {
        self.store.insert(self.path(name), src.detach().copy()?)
    }
}

/// An online parameter set and its exponential-moving-average twin.
#[derive(Clone, Debug)]
pub struct MomentumPair {
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub coefficient: f64,
}

impl MomentumPair {
    pub fn new(online: ParamStore, momentum: ParamStore, coefficient: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&coefficient) {
            return Err(Error::Config(format!(
                "momentum coefficient {coefficient} outside [0, 1]"
            )));
        }
        Ok(Self {
            online,
            momentum,
            coefficient,
        })
    }
}

/// `momentum <- m * momentum + (1 - m) * online` for every momentum variable,
/// matched to the online variable of the same name.
pub fn momentum_update(pair: &MomentumPair) -> Result<()> {
    let m = pair.coefficient;
    let mut updates = Vec::new();
    for (name, mom) in pair.momentum.vars() {
        let online = pair.online.get(&name).ok_or_else(|| {
            Error::Config(format!(
                "momentum parameter `{name}` has no online counterpart"
            ))
        })?;
        if online.shape() != mom.shape() {
            return Err(Error::Config(format!(
                "shape mismatch for `{name}`: online {:?}, momentum {:?}",
                online.shape(),
                mom.shape()
            )));
        }
        updates.push((mom, online));
    }
    if m == 1.0 {
        return Ok(());
    }
    for (mom, online) in updates {
        let next = ((mom.as_detached_tensor() * m)? + (online.as_detached_tensor() * (1.0 - m))?)?;
        mom.set(&next)?;
    }
    Ok(())
}
