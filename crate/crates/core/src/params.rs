//! Named, ordered parameter storage shared by every trainable component.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. The order is part of the determinism
/// contract: gradient accumulation and optimizer updates walk it front to back.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Same layout as [`ParamStore::bind`] but untracked, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Replaces the values of every parameter, checking names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("parameter names differ"));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::dim(format!(
                    "parameter shape {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight and bias of an affine or convolution layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

impl Layer {
    /// `in -> out` affine layer with a `[in, out]` weight.
    pub fn linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Layer {
            weight: store.add(format!("{name}.weight"), he_uniform(rng, &[cin, cout], cin)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    /// 3x3 convolution with a `[3, 3, cin, cout]` kernel.
    pub fn conv3x3(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Layer {
            weight: store.add(
                format!("{name}.weight"),
                he_uniform(rng, &[3, 3, cin, cout], 9 * cin),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    /// Three-tap spectral convolution with a `[3, cin, cout]` kernel.
    pub fn conv3(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Layer {
            weight: store.add(format!("{name}.weight"), he_uniform(rng, &[3, cin, cout], 3 * cin)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
        }
    }

    pub fn apply_linear(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn apply_conv_spatial(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv_spatial(x, bound.var(self.weight), bound.var(self.bias))
    }

    pub fn apply_conv_spectral(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv_spectral3(x, bound.var(self.weight), bound.var(self.bias))
    }
}
