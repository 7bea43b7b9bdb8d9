use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors, each tagged with an optimizer group.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<usize>,
}

/// One array of a serialized parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: usize) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weight of shape `[1, fan_in, fan_out]`.
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        group: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, Tensor::from_vec([1, fan_in, fan_out], data), group)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        width: usize,
        value: f64,
        group: usize,
    ) -> ParamId {
        self.add(name, Tensor::full([1, 1, width], value), group)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> usize {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| NamedArray {
                name: n.clone(),
                shape: v.shape,
                data: v.data.clone(),
            })
            .collect()
    }

    /// Overwrites every parameter from `arrays`, which must match this store
    /// name for name and shape for shape.
    pub fn load_arrays(&mut self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.values.len(),
                arrays.len()
            )));
        }
        for (i, arr) in arrays.iter().enumerate() {
            if arr.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "array {i}: expected `{}`, found `{}`",
                    self.names[i], arr.name
                )));
            }
            if arr.shape != self.values[i].shape || arr.data.len() != self.values[i].len() {
                return Err(Error::Checkpoint(format!(
                    "array `{}`: expected shape {:?}, found {:?} with {} values",
                    arr.name,
                    self.values[i].shape,
                    arr.shape,
                    arr.data.len()
                )));
            }
            if arr.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "array `{}` has non-finite values",
                    arr.name
                )));
            }
        }
        for (v, arr) in self.values.iter_mut().zip(arrays) {
            v.data.copy_from_slice(&arr.data);
        }
        Ok(())
    }
}

/// Rescales each group's gradients so its global L2 norm is at most
/// `max_norm`. Returns the pre-clipping norm of every group.
pub fn clip_grad_norm(
    store: &ParamStore,
    grads: &mut [Option<Tensor>],
    n_groups: usize,
    max_norm: f64,
) -> Vec<f64> {
    let mut sq = vec![0.0; n_groups];
    for (id, g) in store.ids().zip(grads.iter()) {
        if let Some(g) = g {
            sq[store.group(id)] += g.norm_squared();
        }
    }
    let norms: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    for (id, g) in store.ids().zip(grads.iter_mut()) {
        if let Some(g) = g {
            let n = norms[store.group(id)];
            if n > max_norm {
                g.scale_assign(max_norm / n);
            }
        }
    }
    norms
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut store.values[i].data;
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g.data[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g.data[k] * g.data[k];
                p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
    }
}
