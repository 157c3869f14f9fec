//! Reusable network layers built on the tape.
//!
//! Layers hold [`ParamId`]s into a shared [`ParamStore`]; a forward pass
//! runs inside a [`Ctx`] that binds those parameters onto a fresh tape.

mod gcn;
mod linear;
mod lstm;
mod norm;
mod pool;
mod temporal;

pub use gcn::{GcnLayer, ResGcnBlock};
pub use linear::Linear;
pub use lstm::{LstmCell, LstmGates, LstmStack, StackOutput};
pub use norm::BatchNorm;
pub use pool::{spatial_max_pool, temporal_max_pool};
pub use temporal::{FrameConv, ResCnn, TemporalConv, TC_HIDDEN};

use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-statistic updates queued.
    Train,
    /// Running statistics, no side effects.
    Eval,
}

/// One forward pass: a tape plus read-only access to the parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    mode: Mode,
    running_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            mode,
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub(crate) fn queue_running_update(&mut self, id: ParamId, value: Vec<f64>) {
        self.running_updates.push((id, value));
    }

    /// Buffer updates produced in train mode (batchnorm running statistics).
    pub fn take_running_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.running_updates)
    }
}

/// Writes queued buffer updates back into the store.
pub fn apply_running_updates(store: &mut ParamStore, updates: Vec<(ParamId, Vec<f64>)>) {
    for (id, value) in updates {
        store.get_mut(id).value.data_mut().copy_from_slice(&value);
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, bound, self.rng);
        let name = self.full_name(name);
        self.store.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, Tensor::full(shape, value), trainable)
    }
}

#[cfg(test)]
mod tests;
