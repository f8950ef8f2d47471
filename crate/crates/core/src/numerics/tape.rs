//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. Node ids increase monotonically, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! The tape is not consumed by `backward`: gradients are returned in a fresh
//! [`Gradients`] value and the tape can be differentiated again or extended.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Backward rule for a caller-defined elementwise-or-expanding unary op.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Accumulate `grad_output · ∂output/∂input` into `grad_input`.
    fn vjp(&self, input: &Tensor, output: &Tensor, grad_output: &[f64], grad_input: &mut [f64]);
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddChannel { x: usize, b: usize, per_sample: bool },
    MulChannel { x: usize, g: usize, per_sample: bool },
    Matmul(usize, usize),
    Bmm(usize, usize),
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Relu(usize),
    Silu(usize),
    Sqrt(usize),
    Softmax(usize),
    LayerNorm { x: usize, group: usize, rstd: Vec<f64> },
    BatchNorm { x: usize, rstd: Vec<f64> },
    SumAll(usize),
    SumLast(usize),
    Custom { x: usize, rule: Box<dyn CustomBackward> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddChannel { .. } => "add_channel",
            Op::MulChannel { .. } => "mul_channel",
            Op::Matmul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Upsample2(..) => "upsample2",
            Op::Concat { .. } => "concat",
            Op::Relu(..) => "relu",
            Op::Silu(..) => "silu",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SumAll(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of every operation evaluated in one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        f.debug_struct("Tape")
            .field("len", &nodes.len())
            .field("check_finite", &self.check_finite.get())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one backward sweep, indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any operation whose output contains NaN or infinity.
    pub fn with_finite_check(self, enabled: bool) -> Self {
        self.check_finite.set(enabled);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => {
                nodes[*a].requires_grad || nodes[*b].requires_grad
            }
            Op::AddChannel { x, b: y, .. }
            | Op::MulChannel { x, g: y, .. }
            | Op::Conv2d { x, k: y, .. } => nodes[*x].requires_grad || nodes[*y].requires_grad,
            Op::Concat { inputs, .. } => inputs.iter().any(|&i| nodes[i].requires_grad),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Permute { x, .. }
            | Op::Reshape(x)
            | Op::MaxPool2 { x, .. }
            | Op::Upsample2(x)
            | Op::Relu(x)
            | Op::Silu(x)
            | Op::Sqrt(x)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::SumAll(x)
            | Op::SumLast(x)
            | Op::Custom { x, .. } => nodes[*x].requires_grad,
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn check_same_tape(&self, other: Var<'_>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self, other.tape) {
            return Err(Error::contract(op, "operands live on different tapes"));
        }
        Ok(())
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat<'t>(&'t self, inputs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if inputs.is_empty() {
            return Err(Error::contract("concat", "no inputs"));
        }
        for v in inputs {
            self.check_same_tape(*v, "concat")?;
        }
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.value(v.id)).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("{axis}"), "axis out of range"));
        }
        let mut total = 0;
        for (i, v) in values.iter().enumerate() {
            let s = v.shape();
            let mismatch = s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b);
            if mismatch {
                return Err(Error::dim(
                    "concat",
                    format!("all but {axis}"),
                    format!("input {i} has shape {s:?}, first has {base:?}"),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same_tape(loss, "backward")?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(Error::contract(
                "backward",
                "loss is detached from every differentiable leaf",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            backward_node(&nodes, id, &gy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &nodes[id];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let rest = numel(&shape[2..]);
    (n, c, rest)
}

fn backward_node(nodes: &[Node], id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                gb.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = acc(grads, nodes, *a) {
                for ((g, d), y) in ga.iter_mut().zip(gy).zip(vb.data()) {
                    *g += d * y;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ((g, d), x) in gb.iter_mut().zip(gy).zip(va.data()) {
                    *g += d * x;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
        }
        Op::AddChannel { x, b, per_sample } => {
            let (n, c, rest) = channel_layout(out.shape());
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * rest;
                        let s: f64 = gy[base..base + rest].iter().sum();
                        let bi = if *per_sample { ni * c + ci } else { ci };
                        gb[bi] += s;
                    }
                }
            }
        }
        Op::MulChannel { x, g, per_sample } => {
            let (n, c, rest) = channel_layout(out.shape());
            let (vx, vg) = (&nodes[*x].value, &nodes[*g].value);
            if let Some(gx) = acc(grads, nodes, *x) {
                for ni in 0..n {
                    for ci in 0..c {
                        let gi = if *per_sample { ni * c + ci } else { ci };
                        let scale = vg.data()[gi];
                        let base = (ni * c + ci) * rest;
                        for j in base..base + rest {
                            gx[j] += gy[j] * scale;
                        }
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *g) {
                for ni in 0..n {
                    for ci in 0..c {
                        let gi = if *per_sample { ni * c + ci } else { ci };
                        let base = (ni * c + ci) * rest;
                        let s: f64 = (base..base + rest).map(|j| gy[j] * vx.data()[j]).sum();
                        gg[gi] += s;
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                gemm(
                    MatRef::row_major(gy, m, n),
                    MatRef::transposed(vb.data(), n, k),
                    ga,
                    1.0,
                );
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                gemm(
                    MatRef::transposed(va.data(), k, m),
                    MatRef::row_major(gy, m, n),
                    gb,
                    1.0,
                );
            }
        }
        Op::Bmm(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = vb.shape()[2];
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..bs {
                    gemm(
                        MatRef::row_major(&gy[i * m * n..(i + 1) * m * n], m, n),
                        MatRef::transposed(&vb.data()[i * k * n..(i + 1) * k * n], n, k),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        1.0,
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for i in 0..bs {
                    gemm(
                        MatRef::transposed(&va.data()[i * m * k..(i + 1) * m * k], k, m),
                        MatRef::row_major(&gy[i * m * n..(i + 1) * m * n], m, n),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        1.0,
                    );
                }
            }
        }
        Op::Permute { x, axes } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gy, out.shape(), &inverse);
                gx.iter_mut().zip(back).for_each(|(g, d)| *g += d);
            }
        }
        Op::Conv2d { x, k, stride, pad } => {
            let (vx, vk) = (&nodes[*x].value, &nodes[*k].value);
            conv2d_backward(vx, vk, *stride, *pad, out.shape(), gy, nodes, *x, *k, grads);
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gy[o];
                }
            }
        }
        Op::Upsample2(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let s = out.shape();
                let (nc, ho, wo) = (s[0] * s[1], s[2], s[3]);
                let (hi, wi) = (ho / 2, wo / 2);
                for p in 0..nc {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            gx[p * hi * wi + (oh / 2) * wi + ow / 2] += gy[p * ho * wo + oh * wo + ow];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let s = out.shape();
            let outer = numel(&s[..*axis]);
            let inner = numel(&s[axis + 1..]);
            let total_chunk = s[*axis] * inner;
            let mut offset = 0;
            for &i in inputs {
                let chunk = nodes[i].value.shape()[*axis] * inner;
                if let Some(gi) = acc(grads, nodes, i) {
                    for o in 0..outer {
                        let src = &gy[o * total_chunk + offset..o * total_chunk + offset + chunk];
                        gi[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, d)| *g += d);
                    }
                }
                offset += chunk;
            }
        }
        Op::Relu(x) => {
            let vx = &nodes[*x].value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((g, d), v) in gx.iter_mut().zip(gy).zip(vx.data()) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
            }
        }
        Op::Silu(x) => {
            let vx = &nodes[*x].value;
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((g, d), &v) in gx.iter_mut().zip(gy).zip(vx.data()) {
                    let s = sigmoid(v);
                    *g += d * (s * (1.0 + v * (1.0 - s)));
                }
            }
        }
        Op::Sqrt(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((g, d), y) in gx.iter_mut().zip(gy).zip(out.data()) {
                    *g += d * 0.5 / y;
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let last = *out.shape().last().unwrap_or(&1);
                for (row, (gyr, yr)) in gy.chunks(last).zip(out.data().chunks(last)).enumerate() {
                    let dot: f64 = gyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let gr = &mut gx[row * last..(row + 1) * last];
                    for j in 0..last {
                        gr[j] += yr[j] * (gyr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, group, rstd } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let g = *group;
                for (gi, r) in rstd.iter().enumerate() {
                    let range = gi * g..(gi + 1) * g;
                    let dy = &gy[range.clone()];
                    let xhat = &out.data()[range.clone()];
                    let sum_dy: f64 = dy.iter().sum();
                    let sum_dy_xhat: f64 = dy.iter().zip(xhat).map(|(a, b)| a * b).sum();
                    let nf = g as f64;
                    for (j, idx) in range.enumerate() {
                        gx[idx] += r / nf * (nf * dy[j] - sum_dy - xhat[j] * sum_dy_xhat);
                    }
                }
            }
        }
        Op::BatchNorm { x, rstd } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let (n, c, rest) = channel_layout(out.shape());
                let count = (n * rest) as f64;
                for (ci, r) in rstd.iter().enumerate() {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for ni in 0..n {
                        let base = (ni * c + ci) * rest;
                        for j in base..base + rest {
                            sum_dy += gy[j];
                            sum_dy_xhat += gy[j] * out.data()[j];
                        }
                    }
                    for ni in 0..n {
                        let base = (ni * c + ci) * rest;
                        for j in base..base + rest {
                            gx[j] += r / count * (count * gy[j] - sum_dy - out.data()[j] * sum_dy_xhat);
                        }
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
        Op::SumLast(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                let last = *nodes[*x].value.shape().last().unwrap_or(&1);
                for (row, d) in gy.iter().enumerate() {
                    gx[row * last..(row + 1) * last].iter_mut().for_each(|g| *g += d);
                }
            }
        }
        Op::Custom { x, rule } => {
            let vx = &nodes[*x].value;
            if let Some(gx) = acc(grads, nodes, *x) {
                rule.vjp(vx, out, gy, gx);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (last_dim, last_stride) = (out_shape[last], strides[last]);
    loop {
        for j in 0..last_dim {
            out.push(data[offset + j * last_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
}

fn im2col(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * h + ih as usize) * w..(c * h + ih as usize + 1) * w];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *d = if iw < 0 || iw >= w as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = (c * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dx[base + iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if x.len() != 4 {
        return Err(Error::dim("conv2d", "input rank", format!("expected [N,Cin,H,W], got {x:?}")));
    }
    if k.len() != 4 {
        return Err(Error::dim("conv2d", "kernel rank", format!("expected [Cout,Cin,kh,kw], got {k:?}")));
    }
    if x[1] != k[1] {
        return Err(Error::dim(
            "conv2d",
            "input axis 1 / kernel axis 1",
            format!("input has {} channels, kernel expects {}", x[1], k[1]),
        ));
    }
    if k[2] % 2 == 0 || k[3] % 2 == 0 {
        return Err(Error::dim("conv2d", "kernel axes 2,3", format!("kernel size {}x{} must be odd", k[2], k[3])));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d", "stride must be positive"));
    }
    let (hp, wp) = (x[2] + 2 * pad, x[3] + 2 * pad);
    if hp < k[2] || wp < k[3] {
        return Err(Error::dim("conv2d", "input axes 2,3", "padded input smaller than kernel"));
    }
    if (hp - k[2]) % stride != 0 || (wp - k[3]) % stride != 0 {
        return Err(Error::dim(
            "conv2d",
            "input axes 2,3",
            format!("(H+2p-kh)/stride is not integral for H={} W={} stride={stride}", x[2], x[3]),
        ));
    }
    Ok(ConvDims {
        n: x[0],
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: k[0],
        kh: k[2],
        kw: k[3],
        ho: (hp - k[2]) / stride + 1,
        wo: (wp - k[3]) / stride + 1,
    })
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(x.shape(), k.shape(), stride, pad)?;
    let rows = d.cin * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let mut cols = vec![0.0; rows * hw];
    let mut out = vec![0.0; d.n * d.cout * hw];
    let in_size = d.cin * d.h * d.w;
    for ni in 0..d.n {
        im2col(
            &x.data()[ni * in_size..(ni + 1) * in_size],
            (d.cin, d.h, d.w),
            (d.kh, d.kw),
            stride,
            pad,
            (d.ho, d.wo),
            &mut cols,
        );
        gemm(
            MatRef::row_major(k.data(), d.cout, rows),
            MatRef::row_major(&cols, rows, hw),
            &mut out[ni * d.cout * hw..(ni + 1) * d.cout * hw],
            0.0,
        );
    }
    Ok(Tensor::from_parts(vec![d.n, d.cout, d.ho, d.wo], out))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    vx: &Tensor,
    vk: &Tensor,
    stride: usize,
    pad: usize,
    _out_shape: &[usize],
    gy: &[f64],
    nodes: &[Node],
    x: usize,
    k: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let d = conv_dims(vx.shape(), vk.shape(), stride, pad).expect("validated in forward");
    let rows = d.cin * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let in_size = d.cin * d.h * d.w;
    let need_k = nodes[k].requires_grad;
    let need_x = nodes[x].requires_grad;
    let mut cols = vec![0.0; rows * hw];
    if need_k {
        let gk = acc(grads, nodes, k).expect("requires grad");
        for ni in 0..d.n {
            im2col(
                &vx.data()[ni * in_size..(ni + 1) * in_size],
                (d.cin, d.h, d.w),
                (d.kh, d.kw),
                stride,
                pad,
                (d.ho, d.wo),
                &mut cols,
            );
            // dK += dY[n] · colsᵀ
            gemm(
                MatRef::row_major(&gy[ni * d.cout * hw..(ni + 1) * d.cout * hw], d.cout, hw),
                MatRef::transposed(&cols, hw, rows),
                gk,
                1.0,
            );
        }
    }
    if need_x {
        let gx = acc(grads, nodes, x).expect("requires grad");
        for ni in 0..d.n {
            // dcols = Kᵀ · dY[n]
            gemm(
                MatRef::transposed(vk.data(), rows, d.cout),
                MatRef::row_major(&gy[ni * d.cout * hw..(ni + 1) * d.cout * hw], d.cout, hw),
                &mut cols,
                0.0,
            );
            col2im(
                &cols,
                (d.cin, d.h, d.w),
                (d.kh, d.kw),
                stride,
                pad,
                (d.ho, d.wo),
                &mut gx[ni * in_size..(ni + 1) * in_size],
            );
        }
    }
}

fn channel_operand(op: &'static str, x: &[usize], b: &[usize]) -> Result<bool> {
    if x.len() < 2 {
        return Err(Error::dim(op, "input rank", format!("expected [N,C,...], got {x:?}")));
    }
    match b {
        [c] if *c == x[1] => Ok(false),
        [n, c] if *n == x[0] && *c == x[1] => Ok(true),
        _ => Err(Error::dim(
            op,
            "axis 1",
            format!("operand {b:?} is neither [C] nor [N,C] for input {x:?}"),
        )),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Reverse sweep from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.tape.check_same_tape(other, op)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, "all", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "add", |a, b| a + b)?;
        self.tape.push(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "sub", |a, b| a - b)?;
        self.tape.push(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.binary(other, "mul", |a, b| a * b)?;
        self.tape.push(v, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * s);
        self.tape.push(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + s);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    /// `x + b` where `x` is `[N,C,...]` and `b` is `[C]` or `[N,C]`,
    /// broadcast over every trailing axis.
    pub fn add_channel(self, b: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(b, "add_channel")?;
        let (x, bv) = (self.value(), b.value());
        let per_sample = channel_operand("add_channel", x.shape(), bv.shape())?;
        let (n, c, rest) = channel_layout(x.shape());
        let mut data = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let add = bv.data()[if per_sample { ni * c + ci } else { ci }];
                let base = (ni * c + ci) * rest;
                data[base..base + rest].iter_mut().for_each(|v| *v += add);
            }
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddChannel {
                x: self.id,
                b: b.id,
                per_sample,
            },
        )
    }

    /// `x * g` with the same broadcasting rule as [`Var::add_channel`].
    pub fn mul_channel(self, g: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(g, "mul_channel")?;
        let (x, gv) = (self.value(), g.value());
        let per_sample = channel_operand("mul_channel", x.shape(), gv.shape())?;
        let (n, c, rest) = channel_layout(x.shape());
        let mut data = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let s = gv.data()[if per_sample { ni * c + ci } else { ci }];
                let base = (ni * c + ci) * rest;
                data[base..base + rest].iter_mut().for_each(|v| *v *= s);
            }
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::MulChannel {
                x: self.id,
                g: g.id,
                per_sample,
            },
        )
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other, "matmul")?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                "rank",
                format!("expected two matrices, got {:?} and {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, k2, n) = (a.shape()[0], a.shape()[1], b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                "lhs axis 1 / rhs axis 0",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(MatRef::row_major(a.data(), m, k), MatRef::row_major(b.data(), k, n), &mut out, 0.0);
        self.tape.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(self.id, other.id))
    }

    /// Batched matrix product of `[B,M,K]` and `[B,K,N]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other, "bmm")?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 {
            return Err(Error::dim("bmm", "rank", format!("{:?} and {:?}", a.shape(), b.shape())));
        }
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        if bs != bs2 {
            return Err(Error::dim("bmm", "axis 0", format!("batch sizes {bs} and {bs2} differ")));
        }
        if k != k2 {
            return Err(Error::dim("bmm", "lhs axis 2 / rhs axis 1", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.tape.push(Tensor::from_parts(vec![bs, m, n], out), Op::Bmm(self.id, other.id))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", "all", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let data = permute_data(x.data(), x.shape(), axes);
        let shape = axes.iter().map(|&a| x.shape()[a]).collect();
        self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swap the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::dim("transpose", "rank", "need at least two axes"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::dim("reshape", "all", format!("cannot view {:?} as {shape:?}", x.shape())));
        }
        self.tape
            .push(Tensor::from_parts(shape.to_vec(), x.data().to_vec()), Op::Reshape(self.id))
    }

    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.tape.check_same_tape(kernel, "conv2d")?;
        let v = conv2d_forward(&self.value(), &kernel.value(), stride, padding)?;
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                stride,
                pad: padding,
            },
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim("max_pool2", "axes 2,3", format!("need [N,C,H,W] with even H,W, got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        let d = x.data();
        for p in 0..nc {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = p * h * w + (2 * oh) * w + 2 * ow;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * oh + di) * w + 2 * ow + dj;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.tape.push(
            Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
            Op::MaxPool2 { x: self.id, argmax },
        )
    }

    /// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::dim("upsample2", "rank", format!("need [N,C,H,W], got {s:?}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(nc * 4 * h * w);
        for p in 0..nc {
            for oh in 0..2 * h {
                let row = &x.data()[p * h * w + (oh / 2) * w..p * h * w + (oh / 2 + 1) * w];
                for ow in 0..2 * w {
                    out.push(row[ow / 2]);
                }
            }
        }
        self.tape
            .push(Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        let v = self.value().map(silu);
        self.tape.push(v, Op::Silu(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("sqrt", "input must be strictly positive"));
        }
        self.tape.push(x.map(f64::sqrt), Op::Sqrt(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let last = *x.shape().last().ok_or_else(|| Error::dim("softmax", "rank", "scalar input"))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.tape
            .push(Tensor::from_parts(x.shape().to_vec(), data), Op::Softmax(self.id))
    }

    /// Normalize each group formed by the trailing `dims` axes to zero mean and
    /// unit variance (biased), without affine parameters.
    pub fn layer_norm(self, dims: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if dims == 0 || dims > x.rank() {
            return Err(Error::dim("layer_norm", "trailing axes", format!("cannot normalize {dims} axes of {:?}", x.shape())));
        }
        let group = numel(&x.shape()[x.rank() - dims..]);
        let mut data = x.data().to_vec();
        let mut rstd = Vec::with_capacity(data.len() / group.max(1));
        for chunk in data.chunks_mut(group) {
            let mean = chunk.iter().sum::<f64>() / group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            let r = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::LayerNorm { x: self.id, group, rstd },
        )
    }

    /// Training-mode batch normalization of `[N,C,...]` over every axis but 1.
    /// Returns the normalized value plus the per-channel batch mean and biased
    /// variance for running-statistics updates.
    pub fn batch_norm(self, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::dim("batch_norm", "rank", format!("need [N,C,...], got {:?}", x.shape())));
        }
        let (n, c, rest) = channel_layout(x.shape());
        let count = (n * rest) as f64;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * rest;
                s += x.data()[base..base + rest].iter().sum::<f64>();
            }
            let mean = s / count;
            let mut v = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * rest;
                v += x.data()[base..base + rest].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>();
            }
            means[ci] = mean;
            vars[ci] = v / count;
        }
        let rstd: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * rest;
                data[base..base + rest]
                    .iter_mut()
                    .for_each(|v| *v = (*v - means[ci]) * rstd[ci]);
            }
        }
        let out = self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::BatchNorm { x: self.id, rstd },
        )?;
        Ok((out, means, vars))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let (&last, lead) = x
            .shape()
            .split_last()
            .ok_or_else(|| Error::dim("sum_last", "rank", "scalar input"))?;
        let data = x.data().chunks(last.max(1)).map(|c| c.iter().sum()).collect();
        self.tape
            .push(Tensor::from_parts(lead.to_vec(), data), Op::SumLast(self.id))
    }

    /// Record a caller-computed `output` of a unary op with its backward rule.
    pub fn custom_unary(self, output: Tensor, rule: Box<dyn CustomBackward>) -> Result<Var<'t>> {
        self.tape.push(output, Op::Custom { x: self.id, rule })
    }
}
