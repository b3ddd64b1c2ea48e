//! Named parameter storage shared by the model, the optimizer and the
//! checkpoint codec.
//!
//! Parameters live in insertion order, which fixes the iteration order of
//! the optimizer and the byte layout of checkpoints. Layers hold [`ParamId`]
//! handles; during a forward pass a [`Ctx`] lifts each referenced parameter
//! onto the tape exactly once, so every parameter has a single leaf per pass
//! and gradients accumulate correctly across shared uses.

use std::cell::RefCell;

use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Value};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Non-trainable entries (norm running stats, positional frequencies)
    /// are lifted onto tapes and saved in checkpoints but never updated.
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total element count over all stored tensors.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Replace a tensor's contents, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter {} shape {:?} cannot take {:?}",
                cur.name,
                cur.tensor.shape(),
                tensor.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }
}

/// Forward-pass context: a tape plus the parameter store, with one leaf per
/// referenced parameter.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Value<'t>>>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&self, id: ParamId) -> Result<Value<'t>> {
        if let Some(v) = self.leaves.borrow()[id.0] {
            return Ok(v);
        }
        let v = self.tape.leaf(self.store.get(id))?;
        self.leaves.borrow_mut()[id.0] = Some(v);
        Ok(v)
    }

    /// Leaf value for this parameter if it was used this pass.
    pub fn used_leaf(&self, id: ParamId) -> Option<Value<'t>> {
        self.leaves.borrow()[id.0]
    }

    /// Lift an arbitrary constant onto the tape.
    pub fn konst(&self, t: &Tensor) -> Result<Value<'t>> {
        self.tape.leaf(t)
    }
}

// ── Weight initialization ───────────────────────────────────────────

/// He-normal fan-in initialization for conv weights `[C_out, C_in/g, k, k]`.
pub fn init_conv(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.next_gaussian() * std)
}

/// Xavier-style initialization for linear weights `[In, Out]`.
pub fn init_linear(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let std = (1.0 / shape[0] as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.next_gaussian() * std)
}
