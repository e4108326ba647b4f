use std::collections::HashMap;

use dewm_autograd::{Real, Tape, Var};

use crate::error::Result;
use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running estimates are collected.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Batch mean and unbiased variance observed by one batch-norm call.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A tape bound to a parameter store. Each parameter enters the tape once,
/// so a network evaluated twice (the shared decoder) accumulates gradient
/// from both evaluations into the same leaf.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    grad_prefixes: Vec<String>,
    bound: HashMap<String, Var>,
    leaves: Vec<(String, Var)>,
    running: Vec<RunningUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    /// Session in which every parameter is a constant.
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_grads(store, mode, &[])
    }

    /// Trainable parameters whose name starts with one of `prefixes` become
    /// differentiable leaves; all others are constants.
    pub fn with_grads(store: &'s ParamStore<T>, mode: Mode, prefixes: &[&str]) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            grad_prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
            bound: HashMap::new(),
            leaves: Vec::new(),
            running: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let differentiable = self.store.kind(name) == Some(ParamKind::Trainable)
            && self.grad_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if differentiable {
            let v = self.tape.leaf(value);
            self.leaves.push((name.to_string(), v));
            v
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Whether `name` is bound or can be bound from the store.
    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.contains(name)
    }

    /// Binds every parameter of `other` under `prefix` as a constant, for
    /// parameters kept outside the session's own store.
    pub fn bind_constants(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (name, entry) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let v = self.tape.constant(entry.value.clone());
            self.bound.insert(name.to_string(), v);
        }
    }

    /// Differentiable parameters bound so far, in binding order.
    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    pub(crate) fn record_running(&mut self, prefix: &str, mean: Vec<T>, var: Vec<T>) {
        self.running.push(RunningUpdate {
            prefix: prefix.to_string(),
            mean,
            var,
        });
    }

    pub fn running_updates(&self) -> &[RunningUpdate<T>] {
        &self.running
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }
}

/// Blends recorded batch statistics into the running estimates
/// (`running = (1 - momentum) * running + momentum * batch`).
pub fn apply_running_updates<T: Real>(store: &mut ParamStore<T>, updates: &[RunningUpdate<T>], momentum: f64) -> Result<()> {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let t = store.get_mut(&format!("{}.{suffix}", u.prefix))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}
