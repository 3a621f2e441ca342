//! Named parameter storage partitioned into base weights, per-task adapters
//! and per-task heads, plus the binding that exposes parameters to a tape.

use std::collections::HashMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier of one continual-learning task. Task 0 trains the base.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which partition of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Base,
    Adapter(TaskId),
    Head(TaskId),
}

impl ParamGroup {
    pub fn task(self) -> Option<TaskId> {
        match self {
            ParamGroup::Base => None,
            ParamGroup::Adapter(t) | ParamGroup::Head(t) => Some(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Conflict(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            group,
            trainable: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| pred(p.group)).map(|(id, _)| id).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a parameter's value. Frozen parameters refuse updates.
    pub fn update(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::FrozenParam(p.name.clone()));
        }
        if value.shape() != p.value.shape() {
            return Err(Error::Contract(format!(
                "update of `{}` changes shape {:?} -> {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Err(Error::FrozenParam(p.name.clone()));
        }
        Ok(&mut p.value)
    }

    /// Overwrites a value regardless of the trainable flag; used when loading
    /// checkpoints into a freshly built model.
    pub(crate) fn load_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::Dimension(format!(
                "stored `{}` has shape {:?}, model expects {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn count(&self, pred: impl Fn(ParamGroup) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p.group)).map(|p| p.value.numel()).sum()
    }

    /// Content hash over the parameters selected by `pred`, in name order.
    pub fn checksum(&self, pred: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut selected: Vec<&Param> = self.params.iter().filter(|p| pred(p.group)).collect();
        selected.sort_by(|a, b| a.name.cmp(&b.name));
        let mut h = Sha256::new();
        for p in selected {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        digest_u64(h)
    }
}

pub(crate) fn digest_u64(h: Sha256) -> u64 {
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

/// A tape plus the parameters it reads. Each parameter becomes a leaf the first
/// time it is used; trainable parameters become gradient-carrying leaves.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: HashMap<ParamId, Var>,
    frozen: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            frozen: false,
        }
    }

    /// A graph that records every parameter as a constant, for inference.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable && !self.frozen);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every bound trainable parameter, sorted by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
