//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed through [`Var`] handles in
//! execution order. [`Tape::backward`] walks the record once, newest first,
//! and returns the adjoint of every node that depends on a gradient-requiring
//! leaf. The tape also counts forward floating-point operations so callers can
//! compare the cost of different code paths without timing them.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Tensor};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Powf(usize, f64),
    Sqrt(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        input: usize,
        arg: Vec<usize>,
    },
    AvgPool {
        input: usize,
        k: usize,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    Softmax(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    IndexRows {
        input: usize,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    flops: Cell<u64>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads[node].as_deref())
    }

    /// `(parameter, gradient)` for every parameter the loss depends on.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_deref().map(|g| (p, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            flops: Cell::new(0),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward floating-point operations recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    fn count(&self, n: usize) {
        self.flops.set(self.flops.get() + n as u64);
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Records a leaf; it requires gradients when `t.requires_grad()` is set.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls on one tape share a node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let t = store.get(id);
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf, needs);
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &node.op, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> = self
            .param_nodes
            .borrow()
            .iter()
            .filter(|&(_, &n)| n <= loss.id)
            .map(|(&p, &n)| (p, n))
            .collect();
        params.sort_unstable();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => {
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, out.shape(), val(*a).shape()));
            accumulate(grads, nodes, *b, reduce_to(g, out.shape(), val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, reduce_to(g, out.shape(), val(*a).shape()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, reduce_to(&neg, out.shape(), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ma, mb) = (
                broadcast_map(out.shape(), ta.shape()),
                broadcast_map(out.shape(), tb.shape()),
            );
            if nodes[*a].needs_grad {
                let ga: Vec<f64> = (0..g.len()).map(|i| g[i] * tb.data()[mb.at(i)]).collect();
                accumulate(grads, nodes, *a, reduce_to(&ga, out.shape(), ta.shape()));
            }
            if nodes[*b].needs_grad {
                let gb: Vec<f64> = (0..g.len()).map(|i| g[i] * ta.data()[ma.at(i)]).collect();
                accumulate(grads, nodes, *b, reduce_to(&gb, out.shape(), tb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ma, mb) = (
                broadcast_map(out.shape(), ta.shape()),
                broadcast_map(out.shape(), tb.shape()),
            );
            if nodes[*a].needs_grad {
                let ga: Vec<f64> = (0..g.len()).map(|i| g[i] / tb.data()[mb.at(i)]).collect();
                accumulate(grads, nodes, *a, reduce_to(&ga, out.shape(), ta.shape()));
            }
            if nodes[*b].needs_grad {
                let gb: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let bv = tb.data()[mb.at(i)];
                        -g[i] * ta.data()[ma.at(i)] / (bv * bv)
                    })
                    .collect();
                accumulate(grads, nodes, *b, reduce_to(&gb, out.shape(), tb.shape()));
            }
        }
        Op::Neg(a) => accumulate(grads, nodes, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.iter().map(|v| v * s).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Relu(a) => {
            let x = val(*a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            let ga = g.iter().zip(y).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
        }
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(grads, nodes, *a, g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            let ga = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Powf(a, p) => {
            let x = val(*a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(gv, &xv)| gv * p * xv.powf(p - 1.0))
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sqrt(a) => {
            let y = out.data();
            let ga = g.iter().zip(y).map(|(gv, yv)| gv * 0.5 / yv).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatMulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut ga = nodes[*a].needs_grad.then(|| vec![0.0; ta.numel()]);
            let mut gb = nodes[*b].needs_grad.then(|| vec![0.0; tb.numel()]);
            for bi in 0..plan.batch {
                let (oa, ob) = (plan.map_a.at(bi) * m * k, plan.map_b.at(bi) * k * n);
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let bt = kernels::transpose(k, n, &tb.data()[ob..ob + k * n]);
                    kernels::gemm_acc(m, n, k, gc, &bt, &mut ga[oa..oa + m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    let at = kernels::transpose(m, k, &ta.data()[oa..oa + m * k]);
                    kernels::gemm_acc(k, m, n, &at, gc, &mut gb[ob..ob + k * n]);
                }
            }
            if let Some(ga) = ga {
                accumulate(grads, nodes, *a, ga);
            }
            if let Some(gb) = gb {
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let c_out = val(*weight).shape()[0];
            let (pl, hw) = (geom.patch_len(), geom.out_len());
            if nodes[*weight].needs_grad {
                let cols_t = kernels::transpose(pl, hw, cols);
                let mut gw = vec![0.0; c_out * pl];
                kernels::gemm_acc(c_out, hw, pl, g, &cols_t, &mut gw);
                accumulate(grads, nodes, *weight, gw);
            }
            if let Some(b) = bias {
                let gb = (0..c_out).map(|o| g[o * hw..(o + 1) * hw].iter().sum()).collect();
                accumulate(grads, nodes, *b, gb);
            }
            if nodes[*input].needs_grad {
                let wt = kernels::transpose(c_out, pl, val(*weight).data());
                let mut gcols = vec![0.0; pl * hw];
                kernels::gemm_acc(pl, c_out, hw, &wt, g, &mut gcols);
                accumulate(grads, nodes, *input, kernels::col2im(geom, &gcols));
            }
        }
        Op::MaxPool { input, arg } => {
            let mut gi = vec![0.0; val(*input).numel()];
            for (gv, &ix) in g.iter().zip(arg) {
                gi[ix] += gv;
            }
            accumulate(grads, nodes, *input, gi);
        }
        Op::AvgPool { input, k } => {
            let s = val(*input).shape();
            accumulate(grads, nodes, *input, kernels::avg_pool_backward(s[0], s[1], s[2], *k, g));
        }
        Op::Upsample { input, factor } => {
            let s = val(*input).shape();
            let gi = kernels::upsample_bilinear_backward(s[0], s[1], s[2], *factor, g);
            accumulate(grads, nodes, *input, gi);
        }
        Op::Softmax(a) => {
            let y = out.data();
            let n = *out.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let d = gv.numel();
            let gain_d = gv.data();
            if nodes[*gain].needs_grad {
                let mut gg = vec![0.0; d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
                accumulate(grads, nodes, *gain, gg);
            }
            if nodes[*bias].needs_grad {
                let mut gb = vec![0.0; d];
                for gr in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
                accumulate(grads, nodes, *bias, gb);
            }
            if nodes[*input].needs_grad {
                let mut gi = vec![0.0; g.len()];
                let df = d as f64;
                for (r, ((gr, xr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gi.chunks_mut(d)).enumerate() {
                    let dxhat: Vec<f64> = gr.iter().zip(gain_d).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = inv_std[r] / df * (df * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
                accumulate(grads, nodes, *input, gi);
            }
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::SumLast(a) => {
            let n = *val(*a).shape().last().unwrap_or(&1);
            let ga = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::Permute { input, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *input, permute_data(g, out.shape(), &inv));
        }
        Op::IndexRows { input, rows } => {
            let t = val(*input);
            let row_len = t.numel() / t.shape()[0].max(1);
            let mut gi = vec![0.0; t.numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..row_len {
                    gi[r * row_len + j] += g[k * row_len + j];
                }
            }
            accumulate(grads, nodes, *input, gi);
        }
    }
}

/// Flat index map from an output shape onto a broadcast operand.
enum IndexMap {
    Identity,
    Table(Vec<usize>),
}

impl IndexMap {
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Table(t) => t[i],
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(out: &[usize], input: &[usize]) -> IndexMap {
    if out == input {
        return IndexMap::Identity;
    }
    let rank = out.len();
    let in_strides = strides(input);
    // Stride of each output axis inside the operand; zero where broadcast.
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            let off = rank - input.len();
            if i < off || input[i - off] == 1 {
                0
            } else {
                in_strides[i - off]
            }
        })
        .collect();
    let total = numel(out);
    let mut table = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        table.push(pos);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    IndexMap::Table(table)
}

/// Sums a gradient over the axes that were broadcast to reach `out`.
fn reduce_to(g: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    if out == input {
        return g.to_vec();
    }
    let map = broadcast_map(out, input);
    let mut r = vec![0.0; numel(input)];
    for (i, gv) in g.iter().enumerate() {
        r[map.at(i)] += gv;
    }
    r
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let rank = shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        out.push(data[pos]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

struct MatMulPlan {
    batch_shape: Vec<usize>,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    map_a: IndexMap,
    map_b: IndexMap,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape(format!("matmul of {a:?} and {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = broadcast_shape(ba, bb).ok_or_else(err)?;
        Ok(MatMulPlan {
            batch: numel(&batch_shape),
            map_a: broadcast_map(&batch_shape, ba),
            map_b: broadcast_map(&batch_shape, bb),
            batch_shape,
            m,
            k,
            n,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64, cost: usize) -> Var<'t> {
        let v = self.value();
        let out = v.map(f);
        self.tape.count(cost * out.numel());
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        mk: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(format!("{name} of {:?} and {:?}", a.shape(), b.shape()))
        })?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ma, mb) = (broadcast_map(&shape, a.shape()), broadcast_map(&shape, b.shape()));
            (0..numel(&shape))
                .map(|i| f(a.data()[ma.at(i)], b.data()[mb.at(i)]))
                .collect()
        };
        self.tape.count(data.len());
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, mk(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x, 1)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s, 1)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s, 1)
    }

    /// `s - x`
    pub fn rsub_scalar(self, s: f64) -> Var<'t> {
        self.neg().add_scalar(s)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0), 1)
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu, 8)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid, 4)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp, 1)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln, 1)
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus, 4)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(Op::Powf(self.id, p), move |x| x.powf(p), 1)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt, 1)
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let plan = MatMulPlan::new(a.shape(), b.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut c = vec![0.0; plan.batch * m * n];
        for bi in 0..plan.batch {
            let (oa, ob) = (plan.map_a.at(bi) * m * k, plan.map_b.at(bi) * k * n);
            kernels::gemm_acc(
                m,
                k,
                n,
                &a.data()[oa..oa + m * k],
                &b.data()[ob..ob + k * n],
                &mut c[bi * m * n..(bi + 1) * m * n],
            );
        }
        self.tape.count(2 * plan.batch * m * k * n);
        let mut shape = plan.batch_shape.clone();
        shape.extend([m, n]);
        let out = Tensor::from_vec(&shape, c)?;
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), needs))
    }

    /// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kh,kw]`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape(format!("conv2d of input {xs:?} with weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], ws[3], stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d output size is not integral for input {xs:?}, kernel {}x{}, stride {stride}, pad {pad}",
                ws[2], ws[3]
            ))
        })?;
        let c_out = ws[0];
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(format!("conv2d bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        let hw = geom.out_len();
        let cols = kernels::im2col(&geom, x.data());
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = bias {
            let bv = b.value();
            for (o, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.fill(bv.data()[o]);
            }
        }
        // Bias initializes the accumulator, then products are added in patch order.
        kernels::gemm_acc(c_out, geom.patch_len(), hw, w.data(), &cols, &mut out);
        self.tape.count(2 * c_out * geom.patch_len() * hw);
        let needs = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let out = Tensor::from_vec(&[c_out, geom.h_out, geom.w_out], out)?;
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            geom,
            cols: if needs && self.tape.grad_enabled { cols } else { Vec::new() },
        };
        Ok(self.tape.push(out, op, needs))
    }

    fn pool_dims(&self, k: usize, name: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 3 || k == 0 || !s[1].is_multiple_of(k) || !s[2].is_multiple_of(k) {
            return Err(Error::shape(format!("{name} window {k} over input {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Non-overlapping `k×k` max pooling of `[C,H,W]`.
    pub fn max_pool2d(self, k: usize) -> Result<Var<'t>> {
        let (c, h, w) = self.pool_dims(k, "max_pool2d")?;
        let (vals, arg) = kernels::max_pool(c, h, w, k, self.value().data());
        self.tape.count(c * h * w);
        let out = Tensor::from_vec(&[c, h / k, w / k], vals)?;
        Ok(self.tape.push(out, Op::MaxPool { input: self.id, arg }, self.requires_grad()))
    }

    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        let (c, h, w) = self.pool_dims(k, "avg_pool2d")?;
        let vals = kernels::avg_pool(c, h, w, k, self.value().data());
        self.tape.count(c * h * w);
        let out = Tensor::from_vec(&[c, h / k, w / k], vals)?;
        Ok(self.tape.push(out, Op::AvgPool { input: self.id, k }, self.requires_grad()))
    }

    /// Bilinear upsampling of `[C,h,w]` by an integer factor (half-pixel centers).
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::arg("upsample factor must be at least 1"));
        }
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("upsample expects [C,H,W], got {s:?}")));
        }
        if factor == 1 {
            return Ok(self);
        }
        let data = kernels::upsample_bilinear(s[0], s[1], s[2], factor, self.value().data());
        self.tape.count(6 * data.len());
        let out = Tensor::from_vec(&[s[0], s[1] * factor, s[2] * factor], data)?;
        Ok(self.tape.push(out, Op::Upsample { input: self.id, factor }, self.requires_grad()))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let n = *v.shape().last().unwrap_or(&1);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.tape.count(4 * data.len());
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.tape.push(out, Op::Softmax(self.id), self.requires_grad())
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let v = self.value();
        let d = *v.shape().last().unwrap_or(&1);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm over width {d} with gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = v.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, x) in row.iter().enumerate() {
                let xh = (x - mean) * is;
                xhat.push(xh);
                out.push(xh * gv.data()[j] + bv.data()[j]);
            }
        }
        self.tape.count(8 * out.len());
        let needs = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let out = Tensor::from_vec(v.shape(), out)?;
        let op = Op::LayerNorm {
            input: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(out, op, needs))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.count(self.numel());
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let s = v.shape();
        let n = *s.last().unwrap_or(&1);
        let data: Vec<f64> = v.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        self.tape.count(v.numel());
        let out = Tensor::from_vec(&s[..s.len().saturating_sub(1)], data).expect("shape");
        self.tape.push(out, Op::SumLast(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("permutation {perm:?} for shape {:?}", v.shape())));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let out = Tensor::from_vec(&shape, permute_data(v.data(), v.shape(), perm))?;
        let op = Op::Permute {
            input: self.id,
            perm: perm.to_vec(),
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Gathers entries along axis 0.
    pub fn index_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape(format!("row gather {rows:?} from shape {s:?}")));
        }
        let row_len = v.numel() / s[0].max(1);
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let out = Tensor::from_vec(&shape, data)?;
        let op = Op::IndexRows {
            input: self.id,
            rows: rows.to_vec(),
        };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }
}
