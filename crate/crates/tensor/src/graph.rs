//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a
//! topological order by construction, so [`Graph::backward`] is a single
//! reverse sweep over the tape.
//!
//! Broadcasting follows right-aligned trailing-dimension matching: the two
//! shapes are aligned at their last axis, the shorter one is padded with
//! leading 1s, and every aligned pair must be equal or contain a 1. The
//! output takes the larger extent per axis. Gradients of a broadcast operand
//! are summed over the expanded axes.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tensor::{strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Element> {
    Leaf,
    Unary { x: Var, kind: Unary },
    Scale { x: Var, factor: T },
    Shift { x: Var },
    Binary { a: Var, b: Var, kind: Binary },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Reduce { x: Var, kind: Reduction, axis: usize, argmax: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    L2Norm { x: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { x: Var, index: Vec<usize> },
    BatchNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Unary { kind, .. } => format!("{kind:?}").to_lowercase(),
            Op::Scale { .. } => "scale".into(),
            Op::Shift { .. } => "shift".into(),
            Op::Binary { kind, .. } => format!("{kind:?}").to_lowercase(),
            Op::MatMul { .. } => "matmul".into(),
            Op::BatchMatMul { .. } => "bmm".into(),
            Op::Reduce { kind, .. } => format!("reduce_{kind:?}").to_lowercase(),
            Op::Softmax { .. } => "softmax".into(),
            Op::LogSoftmax { .. } => "log_softmax".into(),
            Op::L2Norm { .. } => "l2_norm".into(),
            Op::Reshape { .. } => "reshape".into(),
            Op::Permute { .. } => "permute".into(),
            Op::Concat { .. } => "concat".into(),
            Op::GatherRows { .. } => "gather_rows".into(),
            Op::BatchNorm { .. } => "batch_norm".into(),
            Op::Chamfer { .. } => "chamfer".into(),
            Op::Custom { op, .. } => op.name().to_string(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-batch statistics returned by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// The recorded operation graph (tape).
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// Maps a flat output index to a flat operand index under broadcasting.
enum BMap {
    Same,
    Mod(usize),
    Div(usize),
    Table(Vec<usize>),
}

impl BMap {
    fn new(operand: &[usize], out: &[usize]) -> Self {
        let pad = out.len() - operand.len();
        let aligned: Vec<usize> = std::iter::repeat_n(1, pad).chain(operand.iter().copied()).collect();
        if aligned == out {
            return BMap::Same;
        }
        // leading ones then an exact suffix of `out`
        if let Some(first) = aligned.iter().position(|&d| d != 1) {
            if aligned[first..] == out[first..] {
                return BMap::Mod(aligned[first..].iter().product());
            }
            // exact prefix of `out` followed by ones
            let last = aligned.iter().rposition(|&d| d != 1).unwrap();
            if aligned[..=last] == out[..=last] {
                return BMap::Div(out[last + 1..].iter().product());
            }
        } else {
            return BMap::Mod(1);
        }
        let in_strides = strides(&aligned);
        let total: usize = out.iter().product();
        let mut table = Vec::with_capacity(total);
        let mut counter = vec![0usize; out.len()];
        let mut off = 0usize;
        for _ in 0..total {
            table.push(off);
            for ax in (0..out.len()).rev() {
                counter[ax] += 1;
                if aligned[ax] != 1 {
                    off += in_strides[ax];
                }
                if counter[ax] < out[ax] {
                    break;
                }
                if aligned[ax] != 1 {
                    off -= in_strides[ax] * out[ax];
                }
                counter[ax] = 0;
            }
        }
        BMap::Table(table)
    }

    #[inline]
    fn get(&self, o: usize) -> usize {
        match self {
            BMap::Same => o,
            BMap::Mod(n) => o % n,
            BMap::Div(n) => o / n,
            BMap::Table(t) => t[o],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op_name(&self, v: Var) -> String {
        self.nodes[v.0].op.name()
    }

    // ---- elementwise ----

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = &self.nodes[x.0].value;
        let f: fn(T) -> T = match kind {
            Unary::Relu => |a| if a > T::zero() { a } else { T::zero() },
            Unary::Sigmoid => |a| T::one() / (T::one() + (-a).exp()),
            Unary::Square => |a| a * a,
            Unary::Sqrt => |a| a.sqrt(),
            Unary::Exp => |a| a.exp(),
        };
        let out = Tensor::from_fn(xv.shape(), |i| f(xv.data()[i]));
        self.push(out, Op::Unary { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// `x + offset` for a scalar offset.
    pub fn shift(&mut self, x: Var, offset: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + offset);
        self.push(out, Op::Shift { x }, &[x])
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out_shape =
            broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| shape_err(op_name, av.shape(), bv.shape()))?;
        let ma = BMap::new(av.shape(), &out_shape);
        let mb = BMap::new(bv.shape(), &out_shape);
        let (ad, bd) = (av.data(), bv.data());
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let out = match (&ma, &mb) {
            (BMap::Same, BMap::Same) => Tensor::from_fn(&out_shape, |o| f(ad[o], bd[o])),
            (BMap::Same, BMap::Mod(n)) => {
                let mut data = Vec::with_capacity(ad.len());
                for chunk in ad.chunks(*n) {
                    data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
                Tensor::new(&out_shape, data)?
            }
            _ => Tensor::from_fn(&out_shape, |o| f(ad[ma.get(o)], bd[mb.get(o)])),
        };
        Ok(self.push(out, Op::Binary { a, b, kind }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ---- linear algebra ----

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), k as isize, 1, bv.data(), n as isize, 1, T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product `[g,m,k] · [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(shape_err("bmm", av.shape(), bv.shape()));
        }
        let (g, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![T::zero(); g * m * n];
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av.data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(&[g, m, n], out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b }, &[a, b]))
    }

    // ---- reductions ----

    /// Reduces `axis`. `Max` routes the gradient to the first maximal index.
    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: usize, keepdim: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (outer, extent, inner) = xv.axis_split(axis, "reduce")?;
        if extent == 0 {
            return Err(TensorError::Domain {
                op: "reduce",
                msg: format!("empty axis {axis} in shape {:?}", xv.shape()),
            });
        }
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for a in 0..extent {
                        let src = &d[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        for (y, &v) in dst.iter_mut().zip(src) {
                            *y += v;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    let inv = T::one() / T::from_usize(extent).unwrap();
                    out.iter_mut().for_each(|y| *y *= inv);
                }
            }
            Reduction::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    let arg = &mut argmax[o * inner..(o + 1) * inner];
                    dst.copy_from_slice(&d[o * extent * inner..(o * extent + 1) * inner]);
                    for a in 1..extent {
                        let src = &d[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                        for i in 0..inner {
                            if src[i] > dst[i] {
                                dst[i] = src[i];
                                arg[i] = a;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&reduced_shape(xv.shape(), axis, keepdim), out)?;
        Ok(self.push(out, Op::Reduce { x, kind, axis, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, Reduction::Sum, axis, keepdim)
    }

    pub fn mean(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, Reduction::Mean, axis, keepdim)
    }

    pub fn max(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce(x, Reduction::Max, axis, keepdim)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0, false)
    }

    fn lane_op(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let xv = &self.nodes[x.0].value;
        let (outer, extent, inner) = xv.axis_split(axis, name)?;
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: name,
                msg: "NaN input".into(),
            });
        }
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * extent + a) * inner + i;
                let mut m = d[idx(0)];
                for a in 1..extent {
                    m = m.max(d[idx(a)]);
                }
                let mut total = T::zero();
                for a in 0..extent {
                    let e = (d[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for a in 0..extent {
                        out[idx(a)] = d[idx(a)] - m - lse;
                    }
                } else {
                    for a in 0..extent {
                        out[idx(a)] = out[idx(a)] / total;
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let op = if log { Op::LogSoftmax { x, axis } } else { Op::Softmax { x, axis } };
        Ok(self.push(out, op, &[x]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lane_op(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lane_op(x, axis, true)
    }

    /// `sqrt(sum(x^2) + eps)` along `axis`.
    pub fn l2_norm(&mut self, x: Var, axis: usize, eps: T, keepdim: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (outer, extent, inner) = xv.axis_split(axis, "l2_norm")?;
        if eps <= T::zero() {
            return Err(TensorError::Domain {
                op: "l2_norm",
                msg: "epsilon must be positive".into(),
            });
        }
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                for i in 0..inner {
                    let v = d[(o * extent + a) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|y| *y = (*y + eps).sqrt());
        let out = Tensor::new(&reduced_shape(xv.shape(), axis, keepdim), out)?;
        Ok(self.push(out, Op::L2Norm { x, axis }, &[x]))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", xv.shape(), perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let out = Tensor::new(&out_shape, permute_data(xv.data(), xv.shape(), perm))?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[xs.first().ok_or_else(|| TensorError::Usage("concat of nothing".into()))?.0]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Selects rows of a `[r, c]` tensor: output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(shape_err("gather_rows", xv.shape(), &[2]));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                msg: format!("row {bad} out of range ({rows} rows)"),
            });
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            data.extend_from_slice(&xv.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(&[index.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    // ---- fused ----

    /// Normalizes each column of `[r, c]` by its batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || xv.shape()[0] == 0 {
            return Err(shape_err("batch_norm", xv.shape(), &[2]));
        }
        let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let inv_rows = T::one() / T::from_usize(rows).unwrap();
        let mut mean = vec![T::zero(); cols];
        for row in d.chunks(cols) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_rows);
        let mut var = vec![T::zero(); cols];
        for row in d.chunks(cols) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s *= inv_rows);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(d.len());
        for row in d.chunks(cols) {
            xhat.extend(row.iter().zip(&mean).zip(&inv_std).map(|((&v, &m), &is)| (v - m) * is));
        }
        let out = Tensor::new(&[rows, cols], xhat.clone())?;
        let v = self.push(out, Op::BatchNorm { x, xhat, inv_std }, &[x]);
        Ok((v, BatchStats { mean, var }))
    }

    /// Symmetric Chamfer distance between `[b, na, d]` and `[b, nb, d]`
    /// point sets, one value per batch element.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 3
            || bv.rank() != 3
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2] != bv.shape()[2]
            || av.shape()[1] == 0
            || bv.shape()[1] == 0
        {
            return Err(shape_err("chamfer", av.shape(), bv.shape()));
        }
        let (batch, na, nb, dim) = (av.shape()[0], av.shape()[1], bv.shape()[1], av.shape()[2]);
        let mut out = vec![T::zero(); batch];
        let mut nn_ab = vec![0; batch * na];
        let mut nn_ba = vec![0; batch * nb];
        for s in 0..batch {
            let pa = &av.data()[s * na * dim..(s + 1) * na * dim];
            let pb = &bv.data()[s * nb * dim..(s + 1) * nb * dim];
            let dist = |i: usize, j: usize| -> T {
                (0..dim).map(|c| (pa[i * dim + c] - pb[j * dim + c]).powi(2)).sum()
            };
            let mut best_b = vec![T::infinity(); nb];
            for i in 0..na {
                let mut best = T::infinity();
                for j in 0..nb {
                    let dd = dist(i, j);
                    if dd < best {
                        best = dd;
                        nn_ab[s * na + i] = j;
                    }
                    if dd < best_b[j] {
                        best_b[j] = dd;
                        nn_ba[s * nb + j] = i;
                    }
                }
                out[s] += best;
            }
            out[s] += best_b.iter().copied().sum();
        }
        let out = Tensor::new(&[batch], out)?;
        Ok(self.push(out, Op::Chamfer { a, b, nn_ab, nn_ba }, &[a, b]))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&vals)?;
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate on leaves that
    /// require them; intermediate gradients are released as the sweep passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            let contributions = node_backward(node, &grad, before);
            for (v, g) in contributions {
                accumulate(before, v, g);
            }
        }
        Ok(())
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }
}

fn accumulate<T: Element>(nodes: &mut [Node<T>], v: Var, contrib: Vec<T>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        None => node.grad = Some(contrib),
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(data[off]);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            off += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

fn node_backward<T: Element>(node: &Node<T>, grad: &[T], before: &[Node<T>]) -> Vec<(Var, Vec<T>)> {
    let y = &node.value;
    let val = |v: Var| &before[v.0].value;
    let needs = |v: Var| before[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xd = val(*x).data();
            let yd = y.data();
            let two = T::one() + T::one();
            let g: Vec<T> = (0..xd.len())
                .map(|i| {
                    let local = match kind {
                        Unary::Relu => {
                            if xd[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sigmoid => yd[i] * (T::one() - yd[i]),
                        Unary::Square => two * xd[i],
                        Unary::Sqrt => T::one() / (two * yd[i]),
                        Unary::Exp => yd[i],
                    };
                    grad[i] * local
                })
                .collect();
            out.push((*x, g));
        }
        Op::Scale { x, factor } => out.push((*x, grad.iter().map(|&g| g * *factor).collect())),
        Op::Shift { x } => out.push((*x, grad.to_vec())),
        Op::Binary { a, b, kind } => {
            let (av, bv) = (val(*a), val(*b));
            let ma = BMap::new(av.shape(), y.shape());
            let mb = BMap::new(bv.shape(), y.shape());
            let (ad, bd) = (av.data(), bv.data());
            // equal shapes, or `b` a trailing block such as a bias row
            let block = match (&ma, &mb) {
                (BMap::Same, BMap::Same) => Some(grad.len().max(1)),
                (BMap::Same, BMap::Mod(n)) => Some(*n),
                _ => None,
            };
            if let Some(n) = block {
                let mut ga = needs(*a).then(|| vec![T::zero(); ad.len()]);
                let mut gb = needs(*b).then(|| vec![T::zero(); bd.len()]);
                for (c, chunk) in grad.chunks(n).enumerate() {
                    let base = c * n;
                    let xa = &ad[base..base + chunk.len()];
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[base..base + chunk.len()];
                        for j in 0..chunk.len() {
                            dst[j] = chunk[j]
                                * match kind {
                                    Binary::Add | Binary::Sub => T::one(),
                                    Binary::Mul => bd[j],
                                    Binary::Div => T::one() / bd[j],
                                };
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for j in 0..chunk.len() {
                            gb[j] += chunk[j]
                                * match kind {
                                    Binary::Add => T::one(),
                                    Binary::Sub => -T::one(),
                                    Binary::Mul => xa[j],
                                    Binary::Div => -xa[j] / (bd[j] * bd[j]),
                                };
                        }
                    }
                }
                out.extend(ga.map(|g| (*a, g)));
                out.extend(gb.map(|g| (*b, g)));
                return out;
            }
            if needs(*a) {
                let mut ga = vec![T::zero(); ad.len()];
                for (o, &g) in grad.iter().enumerate() {
                    let local = match kind {
                        Binary::Add | Binary::Sub => T::one(),
                        Binary::Mul => bd[mb.get(o)],
                        Binary::Div => T::one() / bd[mb.get(o)],
                    };
                    ga[ma.get(o)] += g * local;
                }
                out.push((*a, ga));
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); bd.len()];
                for (o, &g) in grad.iter().enumerate() {
                    let ib = mb.get(o);
                    let local = match kind {
                        Binary::Add => T::one(),
                        Binary::Sub => -T::one(),
                        Binary::Mul => ad[ma.get(o)],
                        Binary::Div => -ad[ma.get(o)] / (bd[ib] * bd[ib]),
                    };
                    gb[ib] += g * local;
                }
                out.push((*b, gb));
            }
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), grad, n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut ga);
                out.push((*a, ga));
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, grad, n as isize, 1, T::zero(), &mut gb);
                out.push((*b, gb));
            }
        }
        Op::BatchMatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (g, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if needs(*a) {
                let mut ga = vec![T::zero(); g * m * k];
                for i in 0..g {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &grad[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        1,
                        n as isize,
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                out.push((*a, ga));
            }
            if needs(*b) {
                let mut gb = vec![T::zero(); g * k * n];
                for i in 0..g {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..(i + 1) * m * k],
                        1,
                        k as isize,
                        &grad[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                        T::zero(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                out.push((*b, gb));
            }
        }
        Op::Reduce { x, kind, axis, argmax } => {
            let xv = val(*x);
            let (outer, extent, inner) = xv.axis_split(*axis, "reduce").expect("validated in forward");
            let mut gx = vec![T::zero(); xv.len()];
            match kind {
                Reduction::Sum | Reduction::Mean => {
                    let scale = if *kind == Reduction::Mean {
                        T::one() / T::from_usize(extent).unwrap()
                    } else {
                        T::one()
                    };
                    for o in 0..outer {
                        for a in 0..extent {
                            for i in 0..inner {
                                gx[(o * extent + a) * inner + i] = grad[o * inner + i] * scale;
                            }
                        }
                    }
                }
                Reduction::Max => {
                    for o in 0..outer {
                        for i in 0..inner {
                            let a = argmax[o * inner + i];
                            gx[(o * extent + a) * inner + i] = grad[o * inner + i];
                        }
                    }
                }
            }
            out.push((*x, gx));
        }
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let xv = val(*x);
            let (outer, extent, inner) = xv.axis_split(*axis, "softmax").expect("validated in forward");
            let yd = y.data();
            let mut gx = vec![T::zero(); xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * extent + a) * inner + i;
                    if log {
                        let s: T = (0..extent).map(|a| grad[idx(a)]).sum();
                        for a in 0..extent {
                            gx[idx(a)] = grad[idx(a)] - yd[idx(a)].exp() * s;
                        }
                    } else {
                        let s: T = (0..extent).map(|a| grad[idx(a)] * yd[idx(a)]).sum();
                        for a in 0..extent {
                            gx[idx(a)] = yd[idx(a)] * (grad[idx(a)] - s);
                        }
                    }
                }
            }
            out.push((*x, gx));
        }
        Op::L2Norm { x, axis } => {
            let xv = val(*x);
            let (outer, extent, inner) = xv.axis_split(*axis, "l2_norm").expect("validated in forward");
            let (xd, yd) = (xv.data(), y.data());
            let mut gx = vec![T::zero(); xv.len()];
            for o in 0..outer {
                for a in 0..extent {
                    for i in 0..inner {
                        let j = (o * extent + a) * inner + i;
                        gx[j] = grad[o * inner + i] * xd[j] / yd[o * inner + i];
                    }
                }
            }
            out.push((*x, gx));
        }
        Op::Reshape { x } => out.push((*x, grad.to_vec())),
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            out.push((*x, permute_data(grad, y.shape(), &inverse)));
        }
        Op::Concat { xs, axis } => {
            let shape = y.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for v in xs {
                let chunk = val(*v).shape()[*axis] * inner;
                if needs(*v) {
                    let mut g = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        g.extend_from_slice(&grad[o * total + offset..o * total + offset + chunk]);
                    }
                    out.push((*v, g));
                }
                offset += chunk;
            }
        }
        Op::GatherRows { x, index } => {
            let xv = val(*x);
            let cols = xv.shape()[1];
            let mut gx = vec![T::zero(); xv.len()];
            for (i, &r) in index.iter().enumerate() {
                for c in 0..cols {
                    gx[r * cols + c] += grad[i * cols + c];
                }
            }
            out.push((*x, gx));
        }
        Op::BatchNorm { x, xhat, inv_std } => {
            let cols = inv_std.len();
            let rows = xhat.len() / cols;
            let rows_t = T::from_usize(rows).unwrap();
            let mut sum_g = vec![T::zero(); cols];
            let mut sum_gx = vec![T::zero(); cols];
            for (grow, xrow) in grad.chunks(cols).zip(xhat.chunks(cols)) {
                for c in 0..cols {
                    sum_g[c] += grow[c];
                    sum_gx[c] += grow[c] * xrow[c];
                }
            }
            let mut gx = Vec::with_capacity(xhat.len());
            for (grow, xrow) in grad.chunks(cols).zip(xhat.chunks(cols)) {
                for c in 0..cols {
                    gx.push(inv_std[c] / rows_t * (rows_t * grow[c] - sum_g[c] - xrow[c] * sum_gx[c]));
                }
            }
            out.push((*x, gx));
        }
        Op::Chamfer { a, b, nn_ab, nn_ba } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, na, nb, dim) = (av.shape()[0], av.shape()[1], bv.shape()[1], av.shape()[2]);
            let two = T::one() + T::one();
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for s in 0..batch {
                let g = grad[s];
                let mut pair = |i: usize, j: usize| {
                    for c in 0..dim {
                        let ia = (s * na + i) * dim + c;
                        let ib = (s * nb + j) * dim + c;
                        let d = two * g * (av.data()[ia] - bv.data()[ib]);
                        ga[ia] += d;
                        gb[ib] -= d;
                    }
                };
                for i in 0..na {
                    pair(i, nn_ab[s * na + i]);
                }
                for j in 0..nb {
                    pair(nn_ba[s * nb + j], j);
                }
            }
            out.push((*a, ga));
            out.push((*b, gb));
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
            for (v, g) in inputs.iter().zip(op.backward(&vals, y, grad)) {
                out.push((*v, g));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);
        let p = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let m2 = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let out = g.matmul(p, m2).unwrap();
        assert_eq!(g.value(out).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_definitions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., -3., 3.]));
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0., 0., 3.]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap()[0], 0.25);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]), Some(vec![2, 4, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[4, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn broadcast_middle_axis_values_and_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64), true);
        let b = g.leaf(t(&[2, 1, 2], &[1., 10., 100., 1000.]), true);
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).at(&[1, 2, 1]), 11.0 * 1000.0);
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        // d/db[0,0,0] = a[0,0,0] + a[0,1,0] + a[0,2,0] = 0 + 2 + 4
        assert_eq!(g.grad(b).unwrap()[0], 6.0);
        assert_eq!(g.grad(a).unwrap()[3], 10.0);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1., 5., 7., 2.]));
        let m = g.max(x, 1, false).unwrap();
        assert_eq!(g.value(m).data(), &[5., 7.]);
        let ones = g.constant(Tensor::ones(&[3, 4]));
        let s = g.sum(ones, 1, false).unwrap();
        assert_eq!(g.value(s).data(), &[4., 4., 4.]);
    }

    #[test]
    fn max_tie_routes_to_first_index() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3., 3.]), true);
        let m = g.max(x, 0, false).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 0.]);
    }

    #[test]
    fn reduce_empty_axis_is_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.max(x, 1, false), Err(TensorError::Domain { .. })));
        assert!(matches!(g.sum(x, 2, false), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn softmax_analytic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0., 0., 0.]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[2f64.ln(), 0.]));
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(g.softmax(x, 0), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn l2_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3., 4.]));
        let n = g.l2_norm(x, 0, 1e-9, false).unwrap();
        assert!((g.value(n).item() - 5.0).abs() < 1e-8);
        let z = g.leaf(t(&[3], &[0., 0., 0.]), true);
        let n = g.l2_norm(z, 0, 1e-9, false).unwrap();
        assert!((g.value(n).item() - 1e-9f64.sqrt()).abs() < 1e-18);
        g.backward(n).unwrap();
        assert!(g.grad(z).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn twice_used_tensor_accumulates() {
        // f = x*x + 3x at x=2 -> df/dx = 2x + 3 = 7
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let xx = g.mul(x, x).unwrap();
        let three_x = g.scale(x, 3.0);
        let f = g.add(xx, three_x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap()[0], 7.0);
    }

    #[test]
    fn permute_and_concat() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let p = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[0., 3., 1., 4., 2., 5.]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 6]);
        assert_eq!(g.value(c).data(), &[0., 1., 2., 0., 1., 2., 3., 4., 5., 3., 4., 5.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn batch_norm_normalizes_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1], &[1., 2., 3., 4.]));
        let (y, stats) = g.batch_norm(x, 0.0).unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert_eq!(stats.var, vec![1.25]);
        let s: f64 = g.value(y).data().iter().sum();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn chamfer_zero_for_identical_sets() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64));
        let b = g.constant(t(&[1, 3, 2], &[4., 5., 0., 1., 2., 3.]));
        let c = g.chamfer(a, b).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }
}
