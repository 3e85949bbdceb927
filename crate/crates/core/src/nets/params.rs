use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{bn_mode, Mode, NetError, BN_EPS};
use crate::autodiff::{BatchStats, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Named tensors of one network: learnable weights plus batch-norm buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    frozen: bool,
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NetError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NetError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Names of learnable tensors (everything except running statistics).
    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|k| !is_buffer(k)).cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen store is bound as constants: no gradients reach it and
    /// batch-norm layers always use running statistics.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Folds training-mode batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats<T>)], momentum: f64) -> Result<(), NetError> {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (layer, stats) in updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let running = self.get_mut(&format!("{layer}.{suffix}"))?;
                for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
        Ok(())
    }

    /// Adds `-lr * grad`-style updates produced by an optimiser.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Tensor<T>)) -> Result<(), NetError> {
        f(self.get_mut(name)?);
        Ok(())
    }
}

/// Binds store tensors to graph nodes for one forward pass.
pub struct Session<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    mode: Mode,
    trainable: bool,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// `trainable` requests gradient-tracking leaves; it is ignored for a
    /// frozen store, which also forces evaluation-mode batch norm.
    pub fn new(store: &'p ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        let frozen = store.is_frozen();
        Session {
            store,
            mode: if frozen { Mode::Eval } else { mode },
            trainable: trainable && !frozen,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var, NetError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn batch_norm(
        &mut self,
        g: &mut Graph<T>,
        layer: &str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<Var, NetError> {
        let mean = self.store.get(&format!("{layer}.running_mean"))?.data();
        let var = self.store.get(&format!("{layer}.running_var"))?.data();
        let (y, stats) = g
            .batch_norm(x, gamma, beta, bn_mode(self.mode, mean, var), T::of(BN_EPS))
            .map_err(|e| NetError::Mismatch {
                layer: layer.to_string(),
                detail: e.to_string(),
            })?;
        if let Some(stats) = stats {
            self.bn_updates.push((layer.to_string(), stats));
        }
        Ok(y)
    }

    /// Gradients of every bound learnable parameter after `backward`.
    pub fn grads(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        if !self.trainable {
            return BTreeMap::new();
        }
        self.bound
            .iter()
            .map(|(k, &v)| (k.clone(), g.grad_or_zeros(v)))
            .collect()
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}
