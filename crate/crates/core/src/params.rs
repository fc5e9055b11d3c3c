//! Named parameter registry and the per-forward binding session.

use std::collections::HashMap;

use gaitforge_tensor::{BatchStats, Checkpoint, Element, Entry, Mode, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GaitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Learning-rate group. Warm-started parameters train at a reduced rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrGroup {
    Base,
    WarmStart,
}

#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub group: LrGroup,
}

/// Non-trainable state such as running normalization statistics.
#[derive(Debug, Clone)]
pub struct Buffer<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<E: Element> {
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
    names: HashMap<String, Slot>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), names: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.insert(name.to_string(), slot).is_some() {
            return Err(GaitError::Config(format!("duplicate parameter name '{}'", name)));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<ParamId> {
        let name = name.into();
        let id = self.params.len();
        self.claim(&name, Slot::Param(id))?;
        self.params.push(Param { name, value, group: LrGroup::Base });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<BufferId> {
        let name = name.into();
        let id = self.buffers.len();
        self.claim(&name, Slot::Buffer(id))?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<E> {
        &self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<E>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    /// Value of a parameter or buffer by name.
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        match self.names.get(name)? {
            Slot::Param(i) => Some(&self.params[*i].value),
            Slot::Buffer(i) => Some(&self.buffers[*i].value),
        }
    }

    /// Replaces a parameter or buffer by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let slot = *self.names.get(name).ok_or_else(|| GaitError::Config(format!("unknown parameter '{}'", name)))?;
        let target = match slot {
            Slot::Param(i) => &mut self.params[i].value,
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if target.shape() != value.shape() {
            return Err(GaitError::ParamShape {
                name: name.to_string(),
                expected: target.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *target = value;
        Ok(())
    }

    /// Element count over parameters whose name satisfies `keep`.
    pub fn numel_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|p| keep(&p.name)).map(|p| p.value.numel()).sum()
    }

    pub fn apply_stats(&mut self, updates: &[StatsUpdate<E>]) {
        for u in updates {
            let (lo, hi) = (u.mean.0.min(u.var.0), u.mean.0.max(u.var.0));
            let (a, b) = self.buffers.split_at_mut(hi);
            let (first, second) = (&mut a[lo].value, &mut b[0].value);
            let (mean, var) = if u.mean.0 < u.var.0 { (first, second) } else { (second, first) };
            u.stats.update_running(mean.data_mut(), var.data_mut(), u.momentum);
        }
    }

    /// Parameters and buffers in registration order.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.push(p.name.clone(), Entry::from_tensor(&p.value));
        }
        for b in &self.buffers {
            ck.push(b.name.clone(), Entry::from_tensor(&b.value));
        }
        ck
    }

    /// Loads every registered name from `ck`; missing names are an error.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> =
            self.params.iter().map(|p| p.name.clone()).chain(self.buffers.iter().map(|b| b.name.clone())).collect();
        for name in names {
            let entry = ck.get(&name).ok_or_else(|| GaitError::Format(format!("checkpoint lacks '{}'", name)))?;
            let t =
                entry.to_tensor::<E>().ok_or_else(|| GaitError::Format(format!("'{}' is not a float entry", name)))?;
            self.set(&name, t)?;
        }
        Ok(())
    }
}

/// A pending running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatsUpdate<E: Element> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<E>,
    pub momentum: f64,
}

/// Binds store parameters to tape variables for one forward pass.
pub struct Session<'a, E: Element> {
    pub tape: &'a mut Tape<E>,
    store: &'a ParamStore<E>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
    updates: Vec<StatsUpdate<E>>,
}

/// What a finished session leaves behind.
pub struct Bindings<E: Element> {
    bound: Vec<Option<Var>>,
    pub updates: Vec<StatsUpdate<E>>,
}

impl<E: Element> Bindings<E> {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn grads(&self, tape: &mut Tape<E>) -> Vec<Option<Tensor<E>>> {
        self.bound.iter().map(|v| v.and_then(|v| tape.take_grad(v))).collect()
    }
}

impl<'a, E: Element> Session<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, store: &'a ParamStore<E>, mode: Mode, seed: u64) -> Self {
        let n = store.params.len();
        Session { tape, store, bound: vec![None; n], mode, rng: ChaCha8Rng::seed_from_u64(seed), updates: Vec::new() }
    }

    /// Uses caller-provided variables for some parameters, e.g. to
    /// differentiate with respect to them in a gradient check.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.tape.grad_enabled();
        let v = self.tape.leaf(self.store.params[id.0].value.clone(), grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<E> {
        &self.store.buffers[id.0].value
    }

    pub fn push_update(&mut self, u: StatsUpdate<E>) {
        self.updates.push(u);
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn finish(self) -> Bindings<E> {
        Bindings { bound: self.bound, updates: self.updates }
    }
}
