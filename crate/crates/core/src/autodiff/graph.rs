use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::primitive::{self, Primitive, PROTECT_EPS};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryFn {
    Neg,
    Square,
    Abs,
    Sign,
    /// Protected `ln(|x| + eps)`.
    PLog,
    /// Protected `sqrt(|x| + eps)`.
    PSqrt,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
    Aq,
    Min,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Unary(UnaryFn, NodeId),
    Binary(BinaryFn, NodeId, NodeId),
    PowConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Broadcast(NodeId),
    Reshape(NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId),
    SumCols(NodeId),
    BroadcastCols(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Pick(NodeId, Arc<[usize]>),
    Scatter(NodeId, Arc<[usize]>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are stored in creation order, so parents always precede children and
/// the arena order is a valid topological order. Gradients are themselves
/// built out of graph operations, which makes every gradient differentiable
/// again when it is kept (see [`Graph::grad`]).
///
/// A graph is confined to one thread while it is being built; it is `Send`
/// and can be moved between threads once finished.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Set once any node value contains a NaN or infinity.
    pub fn non_finite(&self) -> bool {
        self.non_finite
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Drops every node created after `len` nodes existed.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if !self.non_finite && !value.is_finite() {
            self.non_finite = true;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn unary(&mut self, f: UnaryFn, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| eval_unary(f, x));
        let rg = self.rg(&[a]) && f != UnaryFn::Sign;
        self.push(value, Op::Unary(f, a), rg)
    }

    pub fn binary(&mut self, f: BinaryFn, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let shape = broadcast_shape(va.shape(), vb.shape())?;
            let n: usize = shape.iter().product();
            let (da, db) = (va.data(), vb.data());
            let data = (0..n)
                .map(|i| {
                    let x = if da.len() == 1 { da[0] } else { da[i] };
                    let y = if db.len() == 1 { db[0] } else { db[i] };
                    eval_binary(f, x, y)
                })
                .collect();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(f, a, b), rg))
    }

    /// Applies a searchable primitive; `inputs` must match its arity.
    pub fn apply_primitive(&mut self, p: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != p.arity() {
            return Err(Error::usage(format!(
                "primitive `{}` takes {} input(s), got {}",
                p,
                p.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        let y = || inputs[1];
        match p {
            Primitive::Add => self.binary(BinaryFn::Add, x, y()),
            Primitive::Sub => self.binary(BinaryFn::Sub, x, y()),
            Primitive::Mul => self.binary(BinaryFn::Mul, x, y()),
            Primitive::Aq => self.binary(BinaryFn::Aq, x, y()),
            Primitive::Min => self.binary(BinaryFn::Min, x, y()),
            Primitive::Max => self.binary(BinaryFn::Max, x, y()),
            Primitive::Sign => Ok(self.unary(UnaryFn::Sign, x)),
            Primitive::Square => Ok(self.unary(UnaryFn::Square, x)),
            Primitive::Abs => Ok(self.unary(UnaryFn::Abs, x)),
            Primitive::Log => Ok(self.unary(UnaryFn::PLog, x)),
            Primitive::Sqrt => Ok(self.unary(UnaryFn::PSqrt, x)),
            Primitive::Tanh => Ok(self.unary(UnaryFn::Tanh, x)),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryFn::Div, a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Neg, a)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Square, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Exp, a)
    }

    /// Unprotected natural logarithm.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Ln, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Relu, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryFn::Softplus, a)
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.scalar(factor);
        self.mul(c, a)
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let c = self.scalar(offset);
        self.add(a, c)
    }

    /// `a^exponent` for a fixed exponent; intended for non-negative bases.
    pub fn pow_const(&mut self, a: NodeId, exponent: f64) -> NodeId {
        let value = self.value(a).map(|x| x.powf(exponent));
        let rg = self.rg(&[a]);
        self.push(value, Op::PowConst(a, exponent), rg)
    }

    // ---- linear algebra and reductions ------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::usage("mean of an empty tensor"));
        }
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if v.numel() != 1 {
            return Err(Error::usage(format!(
                "broadcast source must hold one element, has shape {:?}",
                v.shape()
            )));
        }
        let value = Tensor::full(shape, v.data()[0]);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[m, n] -> [n]`, summing over rows.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = matrix_dims(v)?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::SumRows(a), rg))
    }

    /// `[n] -> [m, n]`, repeating the vector as every row.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let v = self.value(a);
        let n = vector_len(v)?;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::BroadcastRows(a), rg))
    }

    /// `[m, n] -> [m]`, summing each row.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (m, _) = matrix_dims(v)?;
        let out = (0..m).map(|i| v.row(i).iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::SumCols(a), rg))
    }

    /// `[m] -> [m, n]`, repeating each entry across its row.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let v = self.value(a);
        let m = vector_len(v)?;
        let out = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, cols, out)?, Op::BroadcastCols(a), rg))
    }

    /// `x[m, n] + b[n]` with the bias repeated over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = matrix_dims(self.value(x))?;
        if vector_len(self.value(bias))? != n {
            return Err(Error::usage(format!(
                "bias of shape {:?} does not match {n} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.broadcast_rows(bias, m)?;
        self.add(x, b)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = matrix_dims(v)?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = v.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - mx).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax, `x - (max + ln(sum(exp(x - max))))`.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = matrix_dims(v)?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = v.row(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LogSoftmax(a), rg))
    }

    /// `[m, n] -> [m]`, taking column `indices[i]` from row `i`.
    pub fn pick(&mut self, a: NodeId, indices: Arc<[usize]>) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = matrix_dims(v)?;
        if indices.len() != m {
            return Err(Error::usage(format!(
                "pick needs one index per row: {} rows, {} indices",
                m,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::usage(format!("column index {bad} out of range for {n} columns")));
        }
        let out = indices.iter().enumerate().map(|(i, &j)| v.at(i, j)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), Op::Pick(a, indices), rg))
    }

    /// `[m] -> [m, cols]`, placing entry `i` at column `indices[i]`, zeros elsewhere.
    pub fn scatter(&mut self, a: NodeId, indices: Arc<[usize]>, cols: usize) -> Result<NodeId> {
        let v = self.value(a);
        let m = vector_len(v)?;
        if indices.len() != m || indices.iter().any(|&j| j >= cols) {
            return Err(Error::usage("scatter indices do not match the source"));
        }
        let mut out = vec![0.0; m * cols];
        for (i, &j) in indices.iter().enumerate() {
            out[i * cols + j] = v.data()[i];
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, cols, out)?, Op::Scatter(a, indices), rg))
    }

    // ---- differentiation --------------------------------------------------

    /// Gradients of `output` with respect to `wrt`, as graph nodes.
    ///
    /// `seed` is the upstream gradient of `output` (defaults to ones). The
    /// returned nodes are ordinary graph nodes, so they can be differentiated
    /// again. Nodes that `output` does not depend on receive a zero gradient.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId], seed: Option<NodeId>) -> Result<Vec<NodeId>> {
        let end = output.0 + 1;
        let seed = match seed {
            Some(s) => {
                if self.value(s).shape() != self.value(output).shape() {
                    return Err(Error::usage("seed gradient must match the output shape"));
                }
                s
            }
            None => {
                let shape = self.value(output).shape().to_vec();
                self.constant(Tensor::ones(&shape))
            }
        };

        // Only propagate into nodes that lead to a requested input.
        let mut leads = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                leads[w.0] = true;
            }
        }
        for i in 0..end {
            if leads[i] || !self.nodes[i].requires_grad {
                continue;
            }
            leads[i] = parents(&self.nodes[i].op).iter().any(|p| leads[p.0]);
        }

        let mut adj: Vec<Option<NodeId>> = vec![None; end];
        if leads[output.0] {
            adj[output.0] = Some(seed);
        }
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, pg) in self.vjp(NodeId(i), &op, g)? {
                if !leads[parent.0] || !self.nodes[parent.0].requires_grad {
                    continue;
                }
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(prev) => self.add(prev, pg)?,
                    None => pg,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            out.push(g);
        }
        Ok(out)
    }

    /// Gradients of `output` with respect to `wrt`, as tensors.
    ///
    /// With `record_graph` the gradient computation stays in the graph (so a
    /// later [`Graph::grad`] can differentiate through it); otherwise the
    /// temporary nodes are discarded before returning.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId], record_graph: bool) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let ids = self.grad(output, wrt, None)?;
        let values = ids.iter().map(|&id| self.value(id).clone()).collect();
        if !record_graph {
            self.truncate(mark);
        }
        Ok(values)
    }

    /// Vector-Jacobian products of one node, built from graph operations.
    fn vjp(&mut self, node: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        use BinaryFn as B;
        use UnaryFn as U;
        let out = node;
        Ok(match *op {
            Op::Input => Vec::new(),
            Op::Unary(f, a) => {
                let ga = match f {
                    U::Neg => Some(self.neg(g)),
                    U::Square => {
                        let two_a = self.scale(a, 2.0)?;
                        Some(self.mul(g, two_a)?)
                    }
                    U::Abs => {
                        let s = self.unary(U::Sign, a);
                        Some(self.mul(g, s)?)
                    }
                    U::Sign => None,
                    U::PLog => {
                        let s = self.unary(U::Sign, a);
                        let num = self.mul(g, s)?;
                        let abs = self.unary(U::Abs, a);
                        let den = self.add_scalar(abs, PROTECT_EPS)?;
                        Some(self.div(num, den)?)
                    }
                    U::PSqrt => {
                        let s = self.unary(U::Sign, a);
                        let num = self.mul(g, s)?;
                        let den = self.scale(out, 2.0)?;
                        Some(self.div(num, den)?)
                    }
                    U::Tanh => {
                        let sq = self.square(out);
                        let one = self.scalar(1.0);
                        let d = self.sub(one, sq)?;
                        Some(self.mul(g, d)?)
                    }
                    U::Exp => Some(self.mul(g, out)?),
                    U::Ln => Some(self.div(g, a)?),
                    U::Sqrt => {
                        let den = self.scale(out, 2.0)?;
                        Some(self.div(g, den)?)
                    }
                    U::Sigmoid => {
                        let one = self.scalar(1.0);
                        let c = self.sub(one, out)?;
                        let d = self.mul(out, c)?;
                        Some(self.mul(g, d)?)
                    }
                    U::Softplus => {
                        let s = self.unary(U::Sigmoid, a);
                        Some(self.mul(g, s)?)
                    }
                    U::Relu => {
                        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        let m = self.constant(mask);
                        Some(self.mul(g, m)?)
                    }
                };
                ga.map(|ga| vec![(a, ga)]).unwrap_or_default()
            }
            Op::Binary(f, a, b) => {
                let (ga, gb) = match f {
                    B::Add => (g, g),
                    B::Sub => (g, self.neg(g)),
                    B::Mul => (self.mul(g, b)?, self.mul(g, a)?),
                    B::Div => {
                        let ga = self.div(g, b)?;
                        let t = self.mul(g, out)?;
                        let t = self.div(t, b)?;
                        (ga, self.neg(t))
                    }
                    B::Aq => {
                        // d/dx1 = aq(1, x2); d/dx2 = -out * x2 / (1 + x2^2)
                        let one = self.scalar(1.0);
                        let inv = self.binary(B::Aq, one, b)?;
                        let ga = self.mul(g, inv)?;
                        let t = self.mul(g, out)?;
                        let t = self.mul(t, b)?;
                        let b2 = self.square(b);
                        let den = self.add_scalar(b2, 1.0)?;
                        let t = self.div(t, den)?;
                        (ga, self.neg(t))
                    }
                    B::Min | B::Max => {
                        let mask_a = self.selection_mask(f, a, b);
                        let mask_b = mask_a.map(|m| 1.0 - m);
                        let ma = self.constant(mask_a);
                        let mb = self.constant(mask_b);
                        (self.mul(g, ma)?, self.mul(g, mb)?)
                    }
                };
                let ga = self.reduce_to(ga, a)?;
                let gb = self.reduce_to(gb, b)?;
                vec![(a, ga), (b, gb)]
            }
            Op::PowConst(a, p) => {
                if p == 0.0 {
                    Vec::new()
                } else {
                    let d = self.pow_const(a, p - 1.0);
                    let d = self.scale(d, p)?;
                    vec![(a, self.mul(g, d)?)]
                }
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, self.broadcast(g, &shape)?)]
            }
            Op::Broadcast(a) => {
                let shape = self.value(a).shape().to_vec();
                let s = self.sum(g);
                vec![(a, self.reshape(s, &shape)?)]
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                vec![(a, self.reshape(g, &shape)?)]
            }
            Op::SumRows(a) => {
                let (m, _) = matrix_dims(self.value(a))?;
                vec![(a, self.broadcast_rows(g, m)?)]
            }
            Op::BroadcastRows(a) => vec![(a, self.sum_rows(g)?)],
            Op::SumCols(a) => {
                let (_, n) = matrix_dims(self.value(a))?;
                vec![(a, self.broadcast_cols(g, n)?)]
            }
            Op::BroadcastCols(a) => vec![(a, self.sum_cols(g)?)],
            Op::Softmax(a) => {
                let (_, n) = matrix_dims(self.value(a))?;
                let gs = self.mul(g, out)?;
                let dot = self.sum_cols(gs)?;
                let dot = self.broadcast_cols(dot, n)?;
                let centered = self.sub(g, dot)?;
                vec![(a, self.mul(out, centered)?)]
            }
            Op::LogSoftmax(a) => {
                let (_, n) = matrix_dims(self.value(a))?;
                let total = self.sum_cols(g)?;
                let total = self.broadcast_cols(total, n)?;
                let p = self.exp(out);
                let t = self.mul(p, total)?;
                vec![(a, self.sub(g, t)?)]
            }
            Op::Pick(a, ref idx) => {
                let (_, n) = matrix_dims(self.value(a))?;
                vec![(a, self.scatter(g, idx.clone(), n)?)]
            }
            Op::Scatter(a, ref idx) => vec![(a, self.pick(g, idx.clone())?)],
        })
    }

    /// 1 where the first operand is selected (ties go to the first operand).
    fn selection_mask(&self, f: BinaryFn, a: NodeId, b: NodeId) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape()).expect("checked at construction");
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let data = (0..n)
            .map(|i| {
                let x = if da.len() == 1 { da[0] } else { da[i] };
                let y = if db.len() == 1 { db[0] } else { db[i] };
                let first = match f {
                    BinaryFn::Min => x <= y,
                    _ => x >= y,
                };
                if first {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape from broadcast")
    }

    /// Sums a broadcast gradient back down to the shape of `target`.
    fn reduce_to(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        if self.value(g).shape() == self.value(target).shape() {
            return Ok(g);
        }
        let shape = self.value(target).shape().to_vec();
        let s = self.sum(g);
        self.reshape(s, &shape)
    }
}

fn parents(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Input => Vec::new(),
        Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![a, b],
        Op::Unary(_, a)
        | Op::PowConst(a, _)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Broadcast(a)
        | Op::Reshape(a)
        | Op::SumRows(a)
        | Op::BroadcastRows(a)
        | Op::SumCols(a)
        | Op::BroadcastCols(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Pick(a, _)
        | Op::Scatter(a, _) => vec![a],
    }
}

fn eval_unary(f: UnaryFn, x: f64) -> f64 {
    match f {
        UnaryFn::Neg => -x,
        UnaryFn::Square => x * x,
        UnaryFn::Abs => x.abs(),
        UnaryFn::Sign => primitive::sign(x),
        UnaryFn::PLog => primitive::protected_log(x),
        UnaryFn::PSqrt => primitive::protected_sqrt(x),
        UnaryFn::Tanh => x.tanh(),
        UnaryFn::Exp => x.exp(),
        UnaryFn::Ln => x.ln(),
        UnaryFn::Sqrt => x.sqrt(),
        UnaryFn::Sigmoid => sigmoid(x),
        UnaryFn::Softplus => softplus(x),
        UnaryFn::Relu => x.max(0.0),
    }
}

fn eval_binary(f: BinaryFn, x: f64, y: f64) -> f64 {
    match f {
        BinaryFn::Add => x + y,
        BinaryFn::Sub => x - y,
        BinaryFn::Mul => x * y,
        BinaryFn::Div => x / y,
        BinaryFn::Aq => Primitive::Aq.apply(x, y),
        BinaryFn::Min => Primitive::Min.apply(x, y),
        BinaryFn::Max => Primitive::Max.apply(x, y),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `max + ln(sum(exp(x - max)))` over a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if na == 1 && nb == 1 {
        Ok(if a.len() >= b.len() { a.to_vec() } else { b.to_vec() })
    } else if na == 1 {
        Ok(b.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else {
        Err(Error::usage(format!(
            "shapes {a:?} and {b:?} are not broadcast-compatible (only scalar-with-array is supported)"
        )))
    }
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::usage(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn vector_len(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(Error::usage(format!("expected a vector, got shape {s:?}"))),
    }
}
