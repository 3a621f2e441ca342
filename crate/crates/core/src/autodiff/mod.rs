//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every op appends one node holding its output value. Nodes whose inputs do
//! not require gradients are recorded as constants, so a frozen sub-network
//! costs nothing on the backward pass beyond what is needed to reach the
//! trainable leaves. A tape is single-writer and lives for one training step.

mod conv;
mod ops;

use std::collections::HashMap;

pub use conv::Conv3dGeom;
pub(crate) use ops::sigmoid as sigmoid_scalar;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use self::conv::ConvDims;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Recorded operation with whatever its backward rule needs. Inputs are node
/// indices; outputs are the node the op is attached to.
#[derive(Debug)]
enum Op {
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    AddBias { x: usize, b: usize, outer: usize, len: usize, inner: usize },
    Sum { x: usize },
    Mean { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Slice { x: usize, outer: usize, len: usize, inner: usize, start: usize, width: usize },
    Concat { xs: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64>, c: usize },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Conv3d { x: usize, w: usize, dims: ConvDims, geom: Conv3dGeom },
    Deconv3d { x: usize, w: usize, dims: ConvDims, geom: Conv3dGeom },
    Depthwise3d { x: usize, w: usize, dims: ConvDims, pad: [usize; 3] },
    SegLoss { logits: usize, target: Tensor, smooth: f64 },
}

/// The computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. Leaves that require gradients but were
    /// unreachable from every loss so far report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || node.op.is_some() {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.leaf_grads.get(&v.0) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::from_parts(shape, vec![0.0; node.value.numel()]),
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Appends a node; drops the op record when no input requires gradients.
    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar loss, adding into the leaf gradients.
    /// Calling it again without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                None => {
                    if node.requires_grad {
                        accumulate(self.leaf_grads.entry(i).or_default(), g);
                    }
                }
                Some(op) => {
                    for (input, gi) in op.backward(&self.nodes, i, &g) {
                        if !self.nodes[input].requires_grad {
                            continue;
                        }
                        match &mut scratch[input] {
                            Some(acc) => add_into(acc, &gi),
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(acc: &mut Vec<f64>, g: Vec<f64>) {
    if acc.is_empty() {
        *acc = g;
    } else {
        add_into(acc, &g);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::MatMul { a, b, .. }
            | Op::MatMulNt { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. } => vec![*a],
            Op::AddBias { x, b, .. } => vec![*x, *b],
            Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Sigmoid { x } => vec![*x],
            Op::Concat { xs, .. } => xs.iter().map(|&(i, _)| i).collect(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv3d { x, w, .. } | Op::Deconv3d { x, w, .. } | Op::Depthwise3d { x, w, .. } => {
                vec![*x, *w]
            }
            Op::SegLoss { logits, .. } => vec![*logits],
        }
    }

    /// Vector-Jacobian products for each input, given the output gradient.
    fn backward(&self, nodes: &[Node], out: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        use crate::linalg::{matmul_new, View};
        let val = |i: usize| nodes[i].value.data();
        let needs = |i: usize| nodes[i].requires_grad;
        match self {
            Op::MatMul { a, b, m, k, n } => {
                let mut r = Vec::with_capacity(2);
                if needs(*a) {
                    r.push((*a, matmul_new(*m, *n, *k, g, View::Normal, val(*b), View::Trans)));
                }
                if needs(*b) {
                    r.push((*b, matmul_new(*k, *m, *n, val(*a), View::Trans, g, View::Normal)));
                }
                r
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let mut r = Vec::with_capacity(2);
                if needs(*a) {
                    r.push((*a, matmul_new(*m, *n, *k, g, View::Normal, val(*b), View::Normal)));
                }
                if needs(*b) {
                    r.push((*b, matmul_new(*n, *m, *k, g, View::Trans, val(*a), View::Normal)));
                }
                r
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale { a, s } => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddBias { x, b, outer, len, inner } => {
                let mut db = vec![0.0; *len];
                if needs(*b) {
                    for o in 0..*outer {
                        for (l, dbl) in db.iter_mut().enumerate() {
                            let start = (o * len + l) * inner;
                            *dbl += g[start..start + inner].iter().sum::<f64>();
                        }
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; nodes[*x].value.numel()])],
            Op::Mean { x } => {
                let n = nodes[*x].value.numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let out_shape = nodes[out].value.shape();
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*x, ops::permute_data(g, out_shape, &inverse))]
            }
            Op::Slice { x, outer, len, inner, start, width } => {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    let dst_start = (o * len + start) * inner;
                    dx[dst_start..dst_start + width * inner].copy_from_slice(src);
                }
                vec![(*x, dx)]
            }
            Op::Concat { xs, outer, inner, total } => {
                let mut offset = 0;
                let mut r = Vec::with_capacity(xs.len());
                for &(i, width) in xs {
                    let mut dx = Vec::with_capacity(outer * width * inner);
                    for o in 0..*outer {
                        let s = (o * total + offset) * inner;
                        dx.extend_from_slice(&g[s..s + width * inner]);
                    }
                    offset += width;
                    r.push((i, dx));
                }
                r
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = nodes[out].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..*len {
                            dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, c } => {
                let c = *c;
                let gv = val(*gain);
                let rows = xhat.len() / c;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let d = gr[j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[r * c + j] = inv_std[r] / cf * (cf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                vec![(*x, g.iter().zip(xv).map(|(g, &x)| g * ops::gelu_grad(x)).collect())]
            }
            Op::Sigmoid { x } => {
                let y = nodes[out].value.data();
                vec![(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::Conv3d { x, w, dims, geom } => {
                let (dx, dw) = conv::conv_backward(val(*x), val(*w), g, dims, geom, needs(*x), needs(*w));
                dx.map(|d| (*x, d)).into_iter().chain(dw.map(|d| (*w, d))).collect()
            }
            Op::Deconv3d { x, w, dims, geom } => {
                let (dx, dw) = conv::deconv_backward(val(*x), val(*w), g, dims, geom, needs(*x), needs(*w));
                dx.map(|d| (*x, d)).into_iter().chain(dw.map(|d| (*w, d))).collect()
            }
            Op::Depthwise3d { x, w, dims, pad } => {
                let (dx, dw) = conv::depthwise_backward(val(*x), val(*w), g, dims, *pad);
                vec![(*x, dx), (*w, dw)]
            }
            Op::SegLoss { logits, target, smooth } => {
                let dz = ops::seg_loss_grad(&nodes[*logits].value, target, *smooth);
                vec![(*logits, dz.into_iter().map(|v| v * g[0]).collect())]
            }
        }
    }
}
