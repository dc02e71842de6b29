//! Named parameters, their binding onto a tape, and the small layers built on them.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat name → tensor table holding every learnable parameter of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Overwrites values from `other`; names and shapes must agree exactly.
    pub fn assign_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Model(format!("parameter count {} does not match {}", other.tensors.len(), self.tensors.len())));
        }
        for (name, t) in &mut self.tensors {
            let src = other.get(name).ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Model(format!("parameter {name}: shape {:?} != {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }
}

/// Seeded parameter initialiser writing into a [`ParamStore`].
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64c(rng.sample::<f64, _>(StandardNormal) * std));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(shape, T::from_f64c(v)));
    }
}

/// Per-head-group activation maps captured during a forward pass.
#[derive(Debug, Clone)]
pub struct BandProbe<T> {
    pub block: String,
    /// Mean attention output per band in LL, HH, HL, LH order, each `[H, W]`.
    pub maps: [Tensor<T>; 4],
}

/// Binds a parameter store onto a tape for one forward pass.
pub struct Ctx<'t, 'p, T: Scalar> {
    pub tape: &'t Tape<T>,
    params: &'p ParamStore<T>,
    trainable: Vec<String>,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
    probes: Option<RefCell<Vec<BandProbe<T>>>>,
}

impl<'t, 'p, T: Scalar> Ctx<'t, 'p, T> {
    /// Every parameter is trainable (when the tape records).
    pub fn new(tape: &'t Tape<T>, params: &'p ParamStore<T>) -> Self {
        Ctx { tape, params, trainable: Vec::new(), bound: RefCell::new(HashMap::new()), probes: None }
    }

    /// Only parameters under one of `prefixes` receive gradients.
    pub fn with_trainable(mut self, prefixes: &[&str]) -> Self {
        self.trainable = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable.is_empty() || self.trainable.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self.params.expect(name).clone();
        let v = if self.is_trainable(name) { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Routes every later `param(name)` to `v` instead of the stored tensor.
    pub fn bind(&self, name: &str, v: Var<'t, T>) {
        self.bound.borrow_mut().insert(name.to_string(), v);
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn record_probe(&self, probe: BandProbe<T>) {
        if let Some(p) = &self.probes {
            p.borrow_mut().push(probe);
        }
    }

    pub fn take_probes(&self) -> Vec<BandProbe<T>> {
        self.probes.as_ref().map(|p| p.take()).unwrap_or_default()
    }

    /// Gradients for every bound, trainable parameter.
    pub fn param_grads(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound.borrow().iter().filter(|(_, v)| v.needs_grad()).map(|(name, v)| (name.clone(), grads.get_or_zeros(*v))).collect()
    }
}

/// Convolution layer descriptor; weights live in the [`ParamStore`] under `name.w` / `name.b`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_gain(init, name, cin, cout, k, stride, 1.0)
    }

    pub fn with_gain<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Self {
        let std = gain / ((cin * k * k) as f64).sqrt();
        init.normal(format!("{name}.w"), &[cout, cin, k, k], std);
        init.constant(format!("{name}.b"), &[cout], 0.0);
        Conv { name: name.to_string(), cin, cout, k, stride }
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        init.constant(format!("{name}.w"), &[cout, cin, k, k], 0.0);
        init.constant(format!("{name}.b"), &[cout], 0.0);
        Conv { name: name.to_string(), cin, cout, k, stride: 1 }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let w = ctx.param(&format!("{}.w", self.name));
        let b = ctx.param(&format!("{}.b", self.name));
        x.conv2d(w, Some(b), self.stride, self.k / 2)
    }
}

/// Nearest ×2 upsampling followed by a 3×3 convolution.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub conv: Conv,
}

impl UpConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        UpConv { conv: Conv::new(init, name, cin, cout, 3, 1) }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.conv.forward(ctx, x.upsample2())
    }
}

/// Per-channel layer norm parameters `name.g` / `name.b`.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub name: String,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        init.constant(format!("{name}.g"), &[channels], 1.0);
        init.constant(format!("{name}.b"), &[channels], 0.0);
        ChannelNorm { name: name.to_string() }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm_channels(ctx.param(&format!("{}.g", self.name)), ctx.param(&format!("{}.b", self.name)))
    }
}
