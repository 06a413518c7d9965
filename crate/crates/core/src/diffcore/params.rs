use std::sync::Arc;

use super::ops::Padding;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replace a parameter's value, keeping its dims.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let cur = &self.params[id.0].value;
        if cur.dims() != value.dims() {
            return Err(Error::dims("assign", format!("{name} {:?}", cur.dims()), value.dims()));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    /// Record every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Record every parameter as a constant, for gradient-free evaluation.
    pub fn bind_constant<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamSet`] recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradient per parameter, in parameter order. Frozen or unreached
    /// parameters yield `None`.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    /// Glorot-initialized weight, zero bias.
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        padding: Padding,
        seed: u64,
        trainable: bool,
    ) -> Self {
        let mut rng = super::init::rng_for(seed, name);
        let (kh, kw) = k;
        let w = super::init::glorot_uniform(&[c_out, c_in, kh, kw], c_in * kh * kw, c_out * kh * kw, &mut rng);
        Self {
            weight: params.add(format!("{name}.weight"), w, trainable),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), trainable),
            stride: 1,
            padding,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.var(self.weight), p.var(self.bias), self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-initialized weight, zero bias.
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, n_in: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = super::init::rng_for(seed, name);
        let w = super::init::glorot_uniform(&[n_out, n_in], n_in, n_out, &mut rng);
        Self {
            weight: params.add(format!("{name}.weight"), w, true),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[n_out]), true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.var(self.weight), p.var(self.bias))
    }
}
