//! Parameters, forward context and the basic layers shared by every model.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::RngCore;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named, ordered collection of model tensors.
///
/// Trainable entries are learnable parameters; the rest are buffers such as
/// batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(
                "ParamStore::set",
                "all",
                format!("{}: {:?} vs {:?}", entry.name, entry.value.shape(), value.shape()),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total learnable scalars.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, value) in updates {
            self.set(id, value)?;
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix while a model is built.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder whose names are nested under `name`.
    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, false)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.param(name, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, gradients on trainable parameters.
    Train,
    /// Frozen running statistics, no gradients.
    Eval,
}

/// One forward pass: the tape, the parameters it reads, and the mode.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    mode: Mode,
    grad: bool,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
    stat_updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            grad: mode == Mode::Train,
            bound: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Override whether trainable parameters are placed on the tape as
    /// differentiable leaves.
    pub fn with_grad(mut self, grad: bool) -> Self {
        self.grad = grad;
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// The tape node for a stored tensor, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let requires_grad = self.grad && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), requires_grad);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    pub(crate) fn record_stat(&self, id: ParamId, value: Tensor) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by train-mode normalization layers.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Gradients for every store entry, aligned with [`ParamStore::ids`].
    /// Entries that were never bound or are not trainable yield `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| bound.get(&id).and_then(|v| grads.get(*v).cloned()))
            .collect()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId));

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.visit_params(&mut |id| ids.push(id));
        ids
    }
}

/// Exact number of learnable scalars owned by `module`.
pub fn count_parameters(store: &ParamStore, module: &dyn Module) -> usize {
    let mut total = 0;
    module.visit_params(&mut |id| {
        if store.is_trainable(id) {
            total += store.get(id).numel();
        }
    });
    total
}

/// Affine map over the last axis of `[B, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_features: usize, out_features: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = pb.uniform("weight", vec![out_features, in_features], bound)?;
        let bias = if bias {
            Some(pb.uniform("bias", vec![out_features], bound)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::dim(
                "linear",
                "axis 1",
                format!("expected [B,{}], got {shape:?}", self.in_features),
            ));
        }
        let w = ctx.param(self.weight).transpose()?;
        let y = x.matmul(w)?;
        match self.bias {
            Some(b) => y.add_channel(ctx.param(b)),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.weight);
        if let Some(b) = self.bias {
            f(b);
        }
    }
}

/// 2-D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = pb.uniform("weight", vec![out_channels, in_channels, kernel, kernel], bound)?;
        let bias = if bias {
            Some(pb.uniform("bias", vec![out_channels], bound)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride: 1,
            padding,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv2d(ctx.param(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => y.add_channel(ctx.param(b)),
            None => Ok(y),
        }
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.weight);
        if let Some(b) = self.bias {
            f(b);
        }
    }
}

/// Batch normalization over `[N,C,H,W]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: pb.param("gamma", Tensor::ones(vec![channels]))?,
            beta: pb.param("beta", Tensor::zeros(vec![channels]))?,
            running_mean: pb.buffer("running_mean", Tensor::zeros(vec![channels]))?,
            running_var: pb.buffer("running_var", Tensor::ones(vec![channels]))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let normalized = if ctx.is_train() {
            let (y, mean, var) = x.batch_norm(self.eps)?;
            let shape = x.shape();
            let count = (x.value().numel() / shape[1]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ctx.store().get(self.running_mean);
            let rv = ctx.store().get(self.running_var);
            let new_mean = Tensor::from_fn(vec![mean.len()], |c| (1.0 - m) * rm.data()[c] + m * mean[c]);
            let new_var = Tensor::from_fn(vec![var.len()], |c| (1.0 - m) * rv.data()[c] + m * var[c] * unbias);
            ctx.record_stat(self.running_mean, new_mean);
            ctx.record_stat(self.running_var, new_var);
            y
        } else {
            let rm = ctx.store().get(self.running_mean);
            let rv = ctx.store().get(self.running_var);
            let shift = ctx.constant(rm.map(|v| -v));
            let scale = ctx.constant(rv.map(|v| 1.0 / (v + self.eps).sqrt()));
            x.add_channel(shift)?.mul_channel(scale)?
        };
        normalized
            .mul_channel(ctx.param(self.gamma))?
            .add_channel(ctx.param(self.beta))
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.gamma);
        f(self.beta);
        f(self.running_mean);
        f(self.running_var);
    }
}

/// Per-sample normalization over `(C,H,W)` with a per-channel affine map
/// (group norm with a single group).
#[derive(Clone, Debug)]
pub struct SampleNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl SampleNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        Ok(SampleNorm {
            gamma: pb.param("gamma", Tensor::ones(vec![channels]))?,
            beta: pb.param("beta", Tensor::zeros(vec![channels]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let rank = x.shape().len();
        x.layer_norm(rank - 1, self.eps)?
            .mul_channel(ctx.param(self.gamma))?
            .add_channel(ctx.param(self.beta))
    }
}

impl Module for SampleNorm {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId)) {
        f(self.gamma);
        f(self.beta);
    }
}
