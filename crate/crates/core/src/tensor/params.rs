use std::cell::RefCell;

use sha2::{Digest, Sha256};

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor. Values are always stored in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

/// Ordered collection of parameters; order is registration order and is
/// the order used by checkpoints and checksums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<Parameter>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        self.entries.push(Parameter {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update((p.name.len() as u32).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Named tensors with an optional name prefix, for checkpointing.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors` (looked up as `prefix + name`).
    pub fn load_named(&mut self, tensors: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for p in &mut self.entries {
            let key = format!("{prefix}{}", p.name);
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing parameter `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(shape_err!(
                    "checkpoint parameter `{key}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Binds parameters onto one graph on first use.
///
/// A trainable binder records gradient-requiring leaves; a frozen one binds
/// constants so no gradient flows into those weights.
pub struct Binder<'p> {
    params: &'p Params,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p Params, trainable: bool) -> Self {
        Self {
            params,
            bound: RefCell::new(vec![None; params.len()]),
            trainable,
        }
    }

    pub fn trainable(params: &'p Params) -> Self {
        Self::new(params, true)
    }

    pub fn frozen(params: &'p Params) -> Self {
        Self::new(params, false)
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn var<T: Real>(&self, g: &Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let value = p.value.cast::<T>();
        let v = g.leaf(value, self.trainable && p.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Substitutes an existing graph node for a parameter (used to
    /// differentiate with respect to one weight in verification).
    pub fn override_with(&self, id: ParamId, v: Var) {
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Gradients of every bound trainable parameter, in `f32`.
    pub fn grads<T: Real>(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<f32>)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let t = grads.tensor(v)?;
                Some((ParamId(i), t.cast::<f32>()))
            })
            .collect()
    }
}
