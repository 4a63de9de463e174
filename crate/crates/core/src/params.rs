//! Named parameter storage, gradient accumulation, and checkpoint layout.
//!
//! A checkpoint is a directory with a `manifest.json` listing names and
//! shapes plus one `.ten` blob per parameter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Grads, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Model parameters keyed by dotted path names (e.g. "head.pconv0.w0").
/// Iteration order is the name order, so every reduction over parameters is
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {}", name)));
        }
        let grad = vec![0.0; value.numel()];
        self.map.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.map
            .get(name)
            .map(|p| p.grad.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} shape {:?} vs new value {:?}",
                name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Add the tape gradients of every parameter leaf into this store.
    /// Repeated calls accumulate, matching the tape's additive contract.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) -> Result<()> {
        for (var, name) in tape.param_vars() {
            if let Some(g) = grads.wrt(var) {
                let p = self
                    .map
                    .get_mut(name)
                    .ok_or_else(|| Error::Config(format!("unknown parameter {}", name)))?;
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            params: self
                .map
                .iter()
                .map(|(name, p)| ManifestEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let f = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(f, &manifest)?;
        for (name, p) in &self.map {
            p.value.save(&dir.join(format!("{}.ten", name)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_reader(f)?;
        let mut store = Self::new();
        for e in manifest.params {
            let t = Tensor::load(&dir.join(format!("{}.ten", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint blob {} has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            store.register(&e.name, t)?;
        }
        Ok(store)
    }

    /// Compare parameter names and shapes against another store; returns the
    /// offending names on mismatch.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, p) in &self.map {
            match other.map.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                _ => bad.push(name.clone()),
            }
        }
        for name in other.map.keys() {
            if !self.map.contains_key(name) {
                bad.push(name.clone());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "incompatible checkpoint, offending parameters: {}",
                bad.join(", ")
            )))
        }
    }
}
