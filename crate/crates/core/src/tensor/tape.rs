use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{broadcast_index_map, broadcast_shape, col2im, gemm, im2col, ConvGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding, identical along every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub pad: usize,
}

impl ConvAttrs {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// The primitive set recorded on a [`Tape`].
///
/// Binary arithmetic broadcasts numpy-style. Convolutions take
/// `[x, weight]` or `[x, weight, bias]`; `GroupNorm` takes `[x, gamma, beta]`;
/// `ScaledDotAttention` takes `[q, k, v]` shaped `[B, n, d]`, `[B, m, d]`,
/// `[B, m, e]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    Conv3d(ConvAttrs),
    ConvTranspose3d(ConvAttrs),
    Conv2d(ConvAttrs),
    GroupNorm { groups: usize, eps: f64 },
    Softmax,
    ScaledDotAttention,
    Silu,
    Tanh,
    Sigmoid,
    EmbeddingLookup(Vec<usize>),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat { axis: usize },
    Sum,
    Mean,
    Mse,
    L1,
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Conv3d(_) => "conv3d",
            Op::ConvTranspose3d(_) => "conv_transpose3d",
            Op::Conv2d(_) => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Softmax => "softmax",
            Op::ScaledDotAttention => "scaled_dot_attention",
            Op::Silu => "silu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::EmbeddingLookup(_) => "embedding_lookup",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Mse => "mse",
            Op::L1 => "l1",
            Op::StopGradient => "stop_gradient",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Vec<f64>,
}

/// Ordered record of primitive applications.
///
/// Node ids are assigned in creation order, so every input precedes its
/// consumer. A tape is single-threaded; use one tape per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<BTreeMap<String, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters are recorded as constants (inference only).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool, saved: Vec<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
            saved,
        });
        Var { tape: self, id }
    }

    /// Record a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad() && self.grad_enabled;
        self.push(tensor, Op::Leaf, vec![], rg, vec![])
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor, Op::Leaf, vec![], false, vec![])
    }

    /// Record (once per tape) the named parameter from `store`.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        let var = self.push(tensor, Op::Leaf, vec![], self.grad_enabled, vec![]);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Apply a primitive to recorded inputs.
    pub fn apply<'t>(&'t self, op: Op, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| nodes[v.id].value.as_ref()).collect();
            let (value, saved) = forward(&op, &vals)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { op: op.name() });
            }
            let rg = !matches!(op, Op::StopGradient)
                && inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, saved, rg)
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        let saved = if requires_grad { saved } else { Vec::new() };
        Ok(self.push(value, op, ids, requires_grad, saved))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n_loss = nodes[loss.id].value.numel();
        if n_loss != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.inputs.is_empty() {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let gin = backward_op(&node.op, &inputs, &node.value, &node.saved, &gout, &needs);
                for (k, g) in gin.into_iter().enumerate() {
                    let Some(g) = g else { continue };
                    let target = node.inputs[k];
                    match &mut grads[target] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[id] = Some(gout);
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Leaves that never received a gradient still have a known shape.
        let params = self
            .params
            .borrow()
            .iter()
            .filter(|(_, &id)| id <= loss.id)
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        let keep: Vec<bool> = nodes[..=loss.id]
            .iter()
            .map(|n| n.requires_grad)
            .collect();
        for (g, keep) in grads.iter_mut().zip(keep) {
            if !keep {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient of `var`; zeros when it does not contribute to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id)
    }

    fn by_id(&self, id: usize) -> Tensor {
        match self.grads.get(id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(self.shapes[id].clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(self.shapes.get(id).cloned().unwrap_or_default()),
        }
    }

    /// Gradients for every parameter recorded via [`Tape::param`].
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &id)| (name.clone(), self.by_id(id)))
            .collect()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op) -> Result<Var<'t>> {
        self.tape.apply(op, &[self])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::Add, &[self, other])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::Sub, &[self, other])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::Mul, &[self, other])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(factor))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::Matmul, &[self, other])
    }

    pub fn conv3d(self, weight: Var<'t>, bias: Option<Var<'t>>, attrs: ConvAttrs) -> Result<Var<'t>> {
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.apply(Op::Conv3d(attrs), &inputs)
    }

    pub fn conv_transpose3d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        attrs: ConvAttrs,
    ) -> Result<Var<'t>> {
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.apply(Op::ConvTranspose3d(attrs), &inputs)
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, attrs: ConvAttrs) -> Result<Var<'t>> {
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.apply(Op::Conv2d(attrs), &inputs)
    }

    pub fn group_norm(self, groups: usize, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape
            .apply(Op::GroupNorm { groups, eps }, &[self, gamma, beta])
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Op::Softmax)
    }

    pub fn attention(self, keys: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::ScaledDotAttention, &[self, keys, values])
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Op::Silu)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid)
    }

    /// Rows of this `[V, E]` table selected by `ids`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::EmbeddingLookup(ids.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(shape.to_vec()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Permute(axes.to_vec()))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        first.tape.apply(Op::Concat { axis }, parts)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Op::Mean)
    }

    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::Mse, &[self, target])
    }

    pub fn l1(self, target: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(Op::L1, &[self, target])
    }

    pub fn stop_gradient(self) -> Result<Var<'t>> {
        self.unary(Op::StopGradient)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn expect_arity(op: &Op, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} takes {:?} inputs, got {}",
            op.name(),
            allowed,
            inputs.len()
        )))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convolution geometry for conv3d / conv2d / conv_transpose3d.
struct ConvPlan {
    batch: usize,
    out_ch: usize,
    geom: ConvGeom,
}

fn conv_plan(op: &Op, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(ConvPlan, Vec<usize>)> {
    let name = op.name();
    let (spatial_rank, attrs) = match op {
        Op::Conv3d(a) | Op::ConvTranspose3d(a) => (3, *a),
        Op::Conv2d(a) => (2, *a),
        _ => unreachable!(),
    };
    if x.rank() != spatial_rank + 2 || w.rank() != spatial_rank + 2 {
        return Err(mismatch(name, x.shape(), w.shape()));
    }
    let xs = x.shape();
    let ws = w.shape();
    let n = xs[0];
    let pad3 = |v: &[usize], fill: usize| -> [usize; 3] {
        if spatial_rank == 3 {
            [v[0], v[1], v[2]]
        } else {
            [fill, v[0], v[1]]
        }
    };
    let stride = if spatial_rank == 3 {
        [attrs.stride; 3]
    } else {
        [1, attrs.stride, attrs.stride]
    };
    let pad = if spatial_rank == 3 {
        [attrs.pad; 3]
    } else {
        [0, attrs.pad, attrs.pad]
    };
    let kernel = pad3(&ws[2..], 1);
    let spatial_in = pad3(&xs[2..], 1);
    match op {
        Op::ConvTranspose3d(_) => {
            // weight [C_in_of_this_op, C_out, k, k, k]; adjoint of conv3d with
            // the same weight, where the conv maps C_out -> C_in.
            if ws[0] != xs[1] {
                return Err(mismatch(name, xs, ws));
            }
            let out_ch = ws[1];
            let mut out_sp = [0; 3];
            for a in 0..3 {
                let full = (spatial_in[a] - 1) * stride[a] + kernel[a];
                if full < 2 * pad[a] + 1 {
                    return Err(mismatch(name, xs, ws));
                }
                out_sp[a] = full - 2 * pad[a];
            }
            let geom = ConvGeom::new(out_ch, out_sp, kernel, stride, pad)
                .ok_or_else(|| mismatch(name, xs, ws))?;
            if geom.output != spatial_in {
                return Err(mismatch(name, xs, ws));
            }
            if let Some(b) = bias {
                if b.shape() != [out_ch] {
                    return Err(mismatch(name, b.shape(), &[out_ch]));
                }
            }
            let shape = vec![n, out_ch, out_sp[0], out_sp[1], out_sp[2]];
            Ok((
                ConvPlan {
                    batch: n,
                    out_ch,
                    geom,
                },
                shape,
            ))
        }
        _ => {
            if ws[1] != xs[1] {
                return Err(mismatch(name, xs, ws));
            }
            let out_ch = ws[0];
            let geom = ConvGeom::new(xs[1], spatial_in, kernel, stride, pad)
                .ok_or_else(|| mismatch(name, xs, ws))?;
            if let Some(b) = bias {
                if b.shape() != [out_ch] {
                    return Err(mismatch(name, b.shape(), &[out_ch]));
                }
            }
            let mut shape = vec![n, out_ch];
            if spatial_rank == 3 {
                shape.extend_from_slice(&geom.output);
            } else {
                shape.extend_from_slice(&geom.output[1..]);
            }
            Ok((
                ConvPlan {
                    batch: n,
                    out_ch,
                    geom,
                },
                shape,
            ))
        }
    }
}

fn conv_forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
    let (plan, shape) = conv_plan(op, x, w, b)?;
    let g = &plan.geom;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = vec![0.0; shape.iter().product()];
    match op {
        Op::ConvTranspose3d(_) => {
            let cin = x.shape()[1];
            let out_len = g.input_len();
            for s in 0..plan.batch {
                let xs = &x.data()[s * cin * cols_n..(s + 1) * cin * cols_n];
                gemm(rows, cin, cols_n, w.data(), true, xs, false, &mut cols, 0.0);
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                col2im(&cols, g, dst);
            }
            if let Some(b) = b {
                let sp = out_len / plan.out_ch;
                for (i, chunk) in out.chunks_mut(sp).enumerate() {
                    let bv = b.data()[i % plan.out_ch];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        _ => {
            let in_len = g.input_len();
            let out_len = plan.out_ch * cols_n;
            for s in 0..plan.batch {
                im2col(&x.data()[s * in_len..(s + 1) * in_len], g, &mut cols);
                let dst = &mut out[s * out_len..(s + 1) * out_len];
                gemm(plan.out_ch, rows, cols_n, w.data(), false, &cols, false, dst, 0.0);
            }
            if let Some(b) = b {
                for (i, chunk) in out.chunks_mut(cols_n).enumerate() {
                    let bv = b.data()[i % plan.out_ch];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }
    Tensor::new(shape, out)
}

fn conv_backward(op: &Op, inputs: &[&Tensor], gout: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (x, w, b) = (inputs[0], inputs[1], inputs.get(2).copied());
    let (plan, _) = conv_plan(op, x, w, b).expect("validated in forward");
    let g = &plan.geom;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
    let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
    let mut gb = (b.is_some() && needs.get(2).copied().unwrap_or(false)).then(|| vec![0.0; plan.out_ch]);
    match op {
        Op::ConvTranspose3d(_) => {
            let cin = x.shape()[1];
            let out_len = g.input_len();
            for s in 0..plan.batch {
                let go = &gout[s * out_len..(s + 1) * out_len];
                im2col(go, g, &mut cols);
                let xs = &x.data()[s * cin * cols_n..(s + 1) * cin * cols_n];
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[s * cin * cols_n..(s + 1) * cin * cols_n];
                    gemm(cin, rows, cols_n, w.data(), false, &cols, false, dst, 0.0);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, cols_n, rows, xs, false, &cols, true, gw, 1.0);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let sp = out_len / plan.out_ch;
                for (i, chunk) in gout.chunks(sp).enumerate() {
                    gb[i % plan.out_ch] += chunk.iter().sum::<f64>();
                }
            }
        }
        _ => {
            let in_len = g.input_len();
            let out_len = plan.out_ch * cols_n;
            let mut gcols = vec![0.0; rows * cols_n];
            for s in 0..plan.batch {
                let go = &gout[s * out_len..(s + 1) * out_len];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[s * in_len..(s + 1) * in_len], g, &mut cols);
                    gemm(plan.out_ch, cols_n, rows, go, false, &cols, true, gw, 1.0);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(rows, plan.out_ch, cols_n, w.data(), true, go, false, &mut gcols, 0.0);
                    col2im(&gcols, g, &mut gx[s * in_len..(s + 1) * in_len]);
                }
            }
            if let Some(gb) = gb.as_mut() {
                for (i, chunk) in gout.chunks(cols_n).enumerate() {
                    gb[i % plan.out_ch] += chunk.iter().sum::<f64>();
                }
            }
        }
    }
    let mut res = vec![gx, gw];
    if b.is_some() {
        res.push(gb);
    }
    res
}

fn permuted(x: &Tensor, axes: &[usize]) -> Vec<f64> {
    let shape = x.shape();
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    let data = x.data();
    for _ in 0..n {
        out.push(data[flat]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn group_stats(x: &Tensor, groups: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
        return Err(Error::invalid(format!(
            "group_norm with {groups} groups on shape {s:?}"
        )));
    }
    let spatial: usize = s[2..].iter().product();
    Ok((s[0], s[1], spatial))
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let plain = |t: Tensor| Ok((t, Vec::new()));
    match op {
        Op::Leaf => Err(Error::invalid("leaf is not an applicable primitive")),
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                return plain(Tensor::new(a.shape().to_vec(), data)?);
            }
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| mismatch(op.name(), a.shape(), b.shape()))?;
            let ma = broadcast_index_map(a.shape(), &shape);
            let mb = broadcast_index_map(b.shape(), &shape);
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect();
            plain(Tensor::new(shape, data)?)
        }
        Op::Scale(c) => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].map(|v| v * c))
        }
        Op::Matmul => {
            expect_arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            plain(Tensor::new(vec![m, n], out)?)
        }
        Op::Conv3d(_) | Op::ConvTranspose3d(_) | Op::Conv2d(_) => {
            expect_arity(op, inputs, &[2, 3])?;
            plain(conv_forward(op, inputs)?)
        }
        Op::GroupNorm { groups, eps } => {
            expect_arity(op, inputs, &[3])?;
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (n, c, sp) = group_stats(x, *groups)?;
            if gamma.shape() != [c] || beta.shape() != [c] {
                return Err(mismatch("group_norm", x.shape(), gamma.shape()));
            }
            let cpg = c / groups;
            let glen = cpg * sp;
            let mut out = vec![0.0; x.numel()];
            let mut saved = Vec::with_capacity(2 * n * groups);
            for (gi, chunk) in x.data().chunks(glen).enumerate() {
                let mean = chunk.iter().sum::<f64>() / glen as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                saved.push(mean);
                saved.push(rstd);
                let g = gi % groups;
                for (j, &v) in chunk.iter().enumerate() {
                    let ch = g * cpg + j / sp;
                    out[gi * glen + j] = (v - mean) * rstd * gamma.data()[ch] + beta.data()[ch];
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, saved))
        }
        Op::Softmax => {
            expect_arity(op, inputs, &[1])?;
            let x = inputs[0];
            let last = *x.shape().last().ok_or_else(|| Error::invalid("softmax on scalar"))?;
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(last.max(1)) {
                softmax_in_place(row);
            }
            plain(Tensor::new(x.shape().to_vec(), out)?)
        }
        Op::ScaledDotAttention => {
            expect_arity(op, inputs, &[3])?;
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
                return Err(mismatch("scaled_dot_attention", q.shape(), k.shape()));
            }
            let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
            let (m, e) = (k.shape()[1], v.shape()[2]);
            if k.shape() != [b, m, d] || v.shape()[..2] != [b, m] {
                return Err(mismatch("scaled_dot_attention", q.shape(), k.shape()));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let mut probs = vec![0.0; b * n * m];
            let mut out = vec![0.0; b * n * e];
            for s in 0..b {
                let qs = &q.data()[s * n * d..(s + 1) * n * d];
                let ks = &k.data()[s * m * d..(s + 1) * m * d];
                let vs = &v.data()[s * m * e..(s + 1) * m * e];
                let ps = &mut probs[s * n * m..(s + 1) * n * m];
                gemm(n, d, m, qs, false, ks, true, ps, 0.0);
                for row in ps.chunks_mut(m) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                gemm(n, m, e, ps, false, vs, false, &mut out[s * n * e..(s + 1) * n * e], 0.0);
            }
            Ok((Tensor::new(vec![b, n, e], out)?, probs))
        }
        Op::Silu => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].map(|x| x * sigmoid(x)))
        }
        Op::Tanh => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].map(f64::tanh))
        }
        Op::Sigmoid => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].map(sigmoid))
        }
        Op::EmbeddingLookup(ids) => {
            expect_arity(op, inputs, &[1])?;
            let t = inputs[0];
            if t.rank() != 2 {
                return Err(Error::invalid("embedding table must be [V, E]"));
            }
            let (vocab, dim) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::invalid(format!("embedding id {id} >= vocabulary {vocab}")));
                }
                out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
            }
            plain(Tensor::new(vec![ids.len(), dim], out)?)
        }
        Op::Reshape(shape) => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].clone().with_requires_grad(false).reshape(shape.clone())?)
        }
        Op::Permute(axes) => {
            expect_arity(op, inputs, &[1])?;
            let x = inputs[0];
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
                return Err(Error::invalid(format!("bad permutation {axes:?} for rank {}", x.rank())));
            }
            let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
            plain(Tensor::new(shape, permuted(x, axes))?)
        }
        Op::Concat { axis } => {
            let first = inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
            let axis = *axis;
            if axis >= first.rank() {
                return Err(Error::invalid(format!("concat axis {axis} >= rank {}", first.rank())));
            }
            let mut total = 0;
            for t in inputs {
                let same = t.rank() == first.rank()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !same {
                    return Err(mismatch("concat", first.shape(), t.shape()));
                }
                total += t.shape()[axis];
            }
            let outer: usize = first.shape()[..axis].iter().product();
            let inner: usize = first.shape()[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let w = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            plain(Tensor::new(shape, out)?)
        }
        Op::Sum => {
            expect_arity(op, inputs, &[1])?;
            plain(Tensor::scalar(inputs[0].sum()))
        }
        Op::Mean => {
            expect_arity(op, inputs, &[1])?;
            plain(Tensor::scalar(inputs[0].mean()))
        }
        Op::Mse | Op::L1 => {
            expect_arity(op, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op.name(), a.shape(), b.shape()));
            }
            let n = a.numel().max(1) as f64;
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| if matches!(op, Op::Mse) { (x - y) * (x - y) } else { (x - y).abs() })
                .sum();
            plain(Tensor::scalar(s / n))
        }
        Op::StopGradient => {
            expect_arity(op, inputs, &[1])?;
            plain(inputs[0].clone().with_requires_grad(false))
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Reduce a broadcast gradient back onto an operand's shape.
fn unbroadcast(g: &[f64], map: Option<&[usize]>, len: usize, scale: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    match map {
        None => out.iter_mut().enumerate().for_each(|(i, o)| *o = g[i] * scale(i)),
        Some(map) => {
            for (i, &j) in map.iter().enumerate() {
                out[j] += g[i] * scale(i);
            }
        }
    }
    out
}

fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &[f64],
    gout: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Leaf | Op::StopGradient => vec![None; inputs.len()],
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let same = a.shape() == b.shape();
            let (ma, mb) = if same {
                (None, None)
            } else {
                (
                    Some(broadcast_index_map(a.shape(), out.shape())),
                    Some(broadcast_index_map(b.shape(), out.shape())),
                )
            };
            let at = |m: &Option<Vec<usize>>, t: &Tensor, i: usize| match m {
                Some(m) => t.data()[m[i]],
                None => t.data()[i],
            };
            let ga = needs[0].then(|| match op {
                Op::Mul => unbroadcast(gout, ma.as_deref(), a.numel(), |i| at(&mb, b, i)),
                _ => unbroadcast(gout, ma.as_deref(), a.numel(), |_| 1.0),
            });
            let gb = needs[1].then(|| match op {
                Op::Mul => unbroadcast(gout, mb.as_deref(), b.numel(), |i| at(&ma, a, i)),
                Op::Sub => unbroadcast(gout, mb.as_deref(), b.numel(), |_| -1.0),
                _ => unbroadcast(gout, mb.as_deref(), b.numel(), |_| 1.0),
            });
            vec![ga, gb]
        }
        Op::Scale(c) => vec![needs[0].then(|| gout.iter().map(|g| g * c).collect())],
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, gout, false, b.data(), true, &mut g, 0.0);
                g
            });
            let gb = needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, gout, false, &mut g, 0.0);
                g
            });
            vec![ga, gb]
        }
        Op::Conv3d(_) | Op::ConvTranspose3d(_) | Op::Conv2d(_) => conv_backward(op, inputs, gout, needs),
        Op::GroupNorm { groups, .. } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let (_, c, sp) = group_stats(x, *groups).expect("validated in forward");
            let cpg = c / groups;
            let glen = cpg * sp;
            let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for (gi, chunk) in x.data().chunks(glen).enumerate() {
                let (mean, rstd) = (saved[2 * gi], saved[2 * gi + 1]);
                let g = gi % groups;
                let go = &gout[gi * glen..(gi + 1) * glen];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..glen {
                    let ch = g * cpg + j / sp;
                    let xhat = (chunk[j] - mean) * rstd;
                    ggamma[ch] += go[j] * xhat;
                    gbeta[ch] += go[j];
                    let dxhat = go[j] * gamma.data()[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(gx) = gx.as_mut() {
                    let inv = 1.0 / glen as f64;
                    for j in 0..glen {
                        let ch = g * cpg + j / sp;
                        let xhat = (chunk[j] - mean) * rstd;
                        let dxhat = go[j] * gamma.data()[ch];
                        gx[gi * glen + j] =
                            rstd * (dxhat - sum_dxhat * inv - xhat * sum_dxhat_xhat * inv);
                    }
                }
            }
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }
        Op::Softmax => {
            let last = *out.shape().last().unwrap_or(&1);
            let mut g = vec![0.0; out.numel()];
            for ((gr, yr), gor) in g.chunks_mut(last).zip(out.data().chunks(last)).zip(gout.chunks(last)) {
                let dot: f64 = yr.iter().zip(gor).map(|(y, g)| y * g).sum();
                for j in 0..last {
                    gr[j] = yr[j] * (gor[j] - dot);
                }
            }
            vec![needs[0].then_some(g)]
        }
        Op::ScaledDotAttention => {
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
            let (m, e) = (k.shape()[1], v.shape()[2]);
            let scale = 1.0 / (d as f64).sqrt();
            let mut gq = vec![0.0; q.numel()];
            let mut gk = vec![0.0; k.numel()];
            let mut gv = vec![0.0; v.numel()];
            let mut dp = vec![0.0; n * m];
            for s in 0..b {
                let ps = &saved[s * n * m..(s + 1) * n * m];
                let go = &gout[s * n * e..(s + 1) * n * e];
                let qs = &q.data()[s * n * d..(s + 1) * n * d];
                let ks = &k.data()[s * m * d..(s + 1) * m * d];
                let vs = &v.data()[s * m * e..(s + 1) * m * e];
                gemm(m, n, e, ps, true, go, false, &mut gv[s * m * e..(s + 1) * m * e], 0.0);
                gemm(n, e, m, go, false, vs, true, &mut dp, 0.0);
                for (dr, pr) in dp.chunks_mut(m).zip(ps.chunks(m)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                gemm(n, m, d, &dp, false, ks, false, &mut gq[s * n * d..(s + 1) * n * d], 0.0);
                gemm(m, n, d, &dp, true, qs, false, &mut gk[s * m * d..(s + 1) * m * d], 0.0);
            }
            vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
        }
        Op::Silu => vec![needs[0].then(|| {
            inputs[0]
                .data()
                .iter()
                .zip(gout)
                .map(|(&x, g)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect()
        })],
        Op::Tanh => vec![needs[0].then(|| out.data().iter().zip(gout).map(|(y, g)| g * (1.0 - y * y)).collect())],
        Op::Sigmoid => vec![needs[0].then(|| out.data().iter().zip(gout).map(|(y, g)| g * y * (1.0 - y)).collect())],
        Op::EmbeddingLookup(ids) => vec![needs[0].then(|| {
            let dim = inputs[0].shape()[1];
            let mut g = vec![0.0; inputs[0].numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..dim {
                    g[id * dim + j] += gout[r * dim + j];
                }
            }
            g
        })],
        Op::Reshape(_) => vec![needs[0].then(|| gout.to_vec())],
        Op::Permute(axes) => vec![needs[0].then(|| {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let g = Tensor::new(out.shape().to_vec(), gout.to_vec()).expect("gradient shape");
            permuted(&g, &inverse)
        })],
        Op::Concat { axis } => {
            let axis = *axis;
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let outer: usize = out.shape()[..axis].iter().product();
            let total = out.shape()[axis];
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for (t, &need) in inputs.iter().zip(needs) {
                let w = t.shape()[axis] * inner;
                if need {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        g.extend_from_slice(&gout[start..start + w]);
                    }
                    res.push(Some(g));
                } else {
                    res.push(None);
                }
                offset += w;
            }
            res
        }
        Op::Sum => vec![needs[0].then(|| vec![gout[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![needs[0].then(|| vec![gout[0] / n as f64; n])]
        }
        Op::Mse | Op::L1 => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = a.numel().max(1) as f64;
            let d: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| {
                    if matches!(op, Op::Mse) {
                        2.0 * (x - y) / n * gout[0]
                    } else {
                        let s = x - y;
                        let sign = if s > 0.0 { 1.0 } else if s < 0.0 { -1.0 } else { 0.0 };
                        sign / n * gout[0]
                    }
                })
                .collect();
            let gb = needs[1].then(|| d.iter().map(|v| -v).collect());
            vec![needs[0].then_some(d), gb]
        }
    }
}
