//! Named, freezable parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use core::hash::Hasher;

use fnv::FnvHasher;

use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    /// Hierarchical dotted name, e.g. `upm.experts.0.blocks.1.attn.wq`.
    pub name: String,
    pub tensor: Tensor<F>,
    pub frozen: bool,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered collection of every parameter of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>, decay: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            frozen: false,
            decay,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Sets `frozen` on every parameter; trainable iff `trainable(name)`.
    pub fn set_trainable_where(&mut self, trainable: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = !trainable(&p.name);
        }
    }

    /// Copies `src`'s values into the parameter `dst` (shapes must agree).
    pub fn assign(&mut self, dst: ParamId, src: &Tensor<F>) -> Result<()> {
        let p = &mut self.params[dst.0];
        if p.tensor.shape() != src.shape() {
            return Err(Error::dim(
                "assign",
                format!(
                    "parameter `{}` has shape {:?}, source has {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.shape()
                ),
            ));
        }
        p.tensor.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over the little-endian bytes of every parameter whose name
    /// satisfies `select`, in registration order.
    pub fn fingerprint(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h = FnvHasher::default();
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            h.write(p.name.as_bytes());
            buf.clear();
            for &v in p.tensor.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }
}
