use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::Real;

/// A named model parameter. Non-trainable parameters are fixed buffers: they
/// are bound as constants and never touched by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn fixed(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

/// Anything that owns parameters.
pub trait HasParams {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

/// Gradients keyed by parameter name.
pub type NamedGrads = BTreeMap<String, Vec<Real>>;

/// Adds `from` into `into` key by key.
pub fn accumulate(into: &mut NamedGrads, from: NamedGrads) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(dst) => {
                for (a, b) in dst.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// A tape plus the bookkeeping that maps parameters to leaves.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    overrides: BTreeMap<String, Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_tape(Tape::new())
    }

    /// Graph whose tape records nothing for the backward pass.
    pub fn inference() -> Self {
        Self::with_tape(Tape::inference())
    }

    fn with_tape(tape: Tape) -> Self {
        Self {
            tape,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            overrides: BTreeMap::new(),
        }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    /// Binds `name` to `value` instead of the parameter's stored value. The
    /// gradient reported under `name` is then the gradient wrt `value`.
    pub fn override_value(&mut self, name: impl Into<String>, value: Tensor) {
        self.overrides.insert(name.into(), value);
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Leaf for a parameter; repeated binds return the same node.
    pub fn bind(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.bound.get(&p.name) {
            return Ok(v);
        }
        let value = self.overrides.get(&p.name).cloned().unwrap_or_else(|| p.value.clone());
        let v = if p.trainable && !self.is_frozen(&p.name) {
            self.tape.leaf(value)?
        } else {
            self.tape.constant(value)?
        };
        self.bound.insert(p.name.clone(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.tape.constant(value)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Extracts per-parameter gradients for every bound, differentiable leaf.
    pub fn named_grads(&self, grads: &mut Gradients) -> NamedGrads {
        let mut out = NamedGrads::new();
        for (name, &v) in &self.bound {
            if !self.tape.requires_grad(v) {
                continue;
            }
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Scalar backward returning named gradients.
    pub fn backward(&self, loss: Var) -> Result<NamedGrads> {
        let mut g = self.tape.backward(loss)?;
        Ok(self.named_grads(&mut g))
    }

    /// Backward from several seeded outputs at once, returning named
    /// gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<Real>)]) -> Result<NamedGrads> {
        let mut g = self.tape.backward_seeded(seeds)?;
        Ok(self.named_grads(&mut g))
    }
}
