//! Named parameter storage shared by every model in the crate.

use std::collections::HashMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-tensor optimizer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    /// 0 = embeddings, `1..=depth` = blocks, `depth + 1` = final norm and heads.
    pub layer: usize,
    /// Exempt from weight decay (norms, biases, tokens, position tables).
    pub wd_exempt: bool,
}

/// Ordered collection of named tensors. Insertion order is the canonical order
/// for checkpoints and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
    meta: Vec<ParamMeta>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new(), meta: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, layer: usize, wd_exempt: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(tensor);
        self.meta.push(ParamMeta { name: name.to_string(), layer, wd_exempt });
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamMeta, &Tensor<T>)> {
        self.meta.iter().zip(&self.tensors)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.meta.iter().map(|m| m.name.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces the tensor under `name`, requiring an identical shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Tensor { name: name.into(), reason: "unknown parameter".into() })?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::Tensor {
                name: name.into(),
                reason: format!("shape {:?} does not match {:?}", tensor.shape(), self.tensors[id.0].shape()),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Registers every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|t| t.cast()).collect(), meta: self.meta.clone(), index: self.index.clone() }
    }

    /// Content hash over names, shapes and raw element bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (m, t) in self.iter() {
            h.update(m.name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_in_bytes());
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Graph handles for every tensor of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps graph handles laid out in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Collects leaf gradients in store order (`None` where nothing flowed).
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.0.iter().map(|&v| g.grad(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

// ── initializers ─────────────────────────────────────────────────────

pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut crate::rng::Prng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.trunc_normal(std))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Xavier-uniform for a `fan_in × fan_out` weight.
pub(crate) fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut crate::rng::Prng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.uniform_in(-bound, bound))).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape matches")
}
