//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value,
//! so node ids are already in topological order and [`Graph::backward`] is a
//! single reverse sweep. Graphs are built per example and thrown away.
//! Trainable tensors live in a [`ParamStore`]; the graph copies their values
//! in and [`Gradients::accumulate_into`] adds the results back to the store's
//! gradient buffers, so repeated backward passes accumulate.
//!
//! All values are matrices (`rows × cols`); a 1-D tensor of length `n` is a
//! `1 × n` row and a scalar is `1 × 1`.

use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    // Shared so graphs can read parameters without copying them.
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 || n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n]).expect("zeros has a consistent shape")
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![1, 1], vec![v]).expect("scalar shape")
    }

    pub fn row(data: Vec<T>) -> Self {
        let n = data.len();
        Tensor::new(vec![1, n], data).expect("row shape")
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, g: &[T]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_grad_rows(&mut self, indices: &[usize], g: &[T]) {
        let c = self.cols();
        let acc = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (k, &idx) in indices.iter().enumerate() {
            for (a, &b) in acc[idx * c..(idx + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scale_grads(&mut self, factor: T) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Embedding { table: ParamId, indices: Vec<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Scale(NodeId, T),
    MeanRows(NodeId),
    Concat(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Row(NodeId, usize),
    Transpose(NodeId),
    Pick(NodeId, usize),
}

/// Node output: computed values are owned, parameter and leaf values are
/// shared with the tensor they came from.
#[derive(Debug, Clone)]
enum Values<T> {
    Owned(Vec<T>),
    Shared(Arc<Vec<T>>),
}

impl<T> Deref for Values<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        match self {
            Values::Owned(v) => v,
            Values::Shared(v) => v,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Values<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    frozen: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: false,
        }
    }

    /// A graph whose parameters are treated as constants. Leaves created
    /// with `requires_grad` still receive gradients.
    pub fn frozen() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        let n = &self.nodes[id.0];
        [n.rows, n.cols]
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.push_values(rows, cols, Values::Owned(value), op, requires_grad)
    }

    fn push_values(&mut self, rows: usize, cols: usize, value: Values<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (x, y) = (self.node(a), self.node(b));
        if x.rows != y.rows || x.cols != y.cols {
            return Err(Error::Shape {
                op,
                left: vec![x.rows, x.cols],
                right: vec![y.rows, y.cols],
            });
        }
        Ok(())
    }

    /// Input tensor; gradients flow to it when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> NodeId {
        let data = Values::Shared(Arc::clone(&tensor.data));
        self.push_values(tensor.rows(), tensor.cols(), data, Op::Leaf, tensor.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<NodeId> {
        if rows * cols != value.len() {
            return Err(Error::Shape {
                op: "constant",
                left: vec![rows, cols],
                right: vec![value.len()],
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let t = store.get(id);
        let rg = !self.frozen;
        self.push_values(t.rows(), t.cols(), Values::Shared(Arc::clone(&t.data)), Op::Param(id), rg)
    }

    /// Gathers rows `indices` of the table parameter `table`.
    pub fn embedding(&mut self, store: &ParamStore<T>, table: ParamId, indices: &[usize]) -> Result<NodeId> {
        let t = store.get(table);
        let c = t.cols();
        let mut value = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::UnknownToken(i));
            }
            value.extend_from_slice(t.row_slice(i));
        }
        let rg = !self.frozen;
        Ok(self.push(
            indices.len(),
            c,
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.node(a), self.node(b));
        if x.cols != y.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![x.rows, x.cols],
                right: vec![y.rows, y.cols],
            });
        }
        let (m, k, n) = (x.rows, x.cols, y.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in x.value[i * k..(i + 1) * k].iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&y.value[kk * n..(kk + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    fn zip_op(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, mk: Op<T>) -> Result<NodeId> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.node(a), self.node(b));
        let value = x.value.iter().zip(y.value.iter()).map(|(&p, &q)| f(p, q)).collect();
        let (r, c) = (x.rows, x.cols);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, value, mk, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: NodeId, f: impl Fn(T) -> T, mk: Op<T>) -> NodeId {
        let x = self.node(a);
        let value = x.value.iter().map(|&v| f(v)).collect();
        let (r, c, rg) = (x.rows, x.cols, x.requires_grad);
        self.push(r, c, value, mk, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, T::tanh, Op::Tanh(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, |v| -v, Op::Neg(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map_op(a, |v| v * v, Op::Square(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        self.map_op(a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(&bad) = self.node(a).value.iter().find(|v| !(**v > T::zero())) {
            return Err(Error::LogDomain(bad.as_f64()));
        }
        Ok(self.map_op(a, T::ln, Op::Log(a)))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.node(a);
        let (r, c) = (x.rows, x.cols);
        let mut value = x.value.to_vec();
        for row in value.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = x.requires_grad;
        self.push(r, c, value, Op::Softmax(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let x = self.node(a);
        let s = x.value.iter().copied().sum();
        let rg = x.requires_grad;
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// Column-wise mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.node(a);
        let (r, c) = (x.rows, x.cols);
        let mut value = vec![T::zero(); c];
        for row in x.value.chunks(c) {
            value.iter_mut().zip(row).for_each(|(v, &e)| *v += e);
        }
        let inv = T::one() / T::of(r as f64);
        value.iter_mut().for_each(|v| *v *= inv);
        let rg = x.requires_grad;
        self.push(1, c, value, Op::MeanRows(a), rg)
    }

    /// Concatenation along the last axis; inputs share a row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.node(parts[0]).rows;
        for &p in parts {
            if self.node(p).rows != rows {
                return Err(Error::Shape {
                    op: "concat",
                    left: vec![rows],
                    right: vec![self.node(p).rows],
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.node(p).cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let n = self.node(p);
                value.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, cols, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks inputs vertically; inputs share a column count.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.node(parts[0]).cols;
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let n = self.node(p);
            if n.cols != cols {
                return Err(Error::Shape {
                    op: "stack_rows",
                    left: vec![cols],
                    right: vec![n.cols],
                });
            }
            value.extend_from_slice(&n.value);
            rows += n.rows;
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, cols, value, Op::StackRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.node(a);
        if start + len > x.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![x.rows, x.cols],
                right: vec![start, len],
            });
        }
        let mut value = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            value.extend_from_slice(&x.value[r * x.cols + start..r * x.cols + start + len]);
        }
        let (rows, rg) = (x.rows, x.requires_grad);
        Ok(self.push(rows, len, value, Op::SliceCols(a, start), rg))
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let x = self.node(a);
        if r >= x.rows {
            return Err(Error::Shape {
                op: "row",
                left: vec![x.rows, x.cols],
                right: vec![r],
            });
        }
        let value = x.value[r * x.cols..(r + 1) * x.cols].to_vec();
        let (c, rg) = (x.cols, x.requires_grad);
        Ok(self.push(1, c, value, Op::Row(a, r), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let x = self.node(a);
        let (r, c) = (x.rows, x.cols);
        let mut value = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = x.value[i * c + j];
            }
        }
        let rg = x.requires_grad;
        self.push(c, r, value, Op::Transpose(a), rg)
    }

    /// Element `index` of the flattened value, as a scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let x = self.node(a);
        let v = *x.value.get(index).ok_or(Error::Shape {
            op: "pick",
            left: vec![x.rows, x.cols],
            right: vec![index],
        })?;
        let rg = x.requires_grad;
        Ok(self.push(1, 1, vec![v], Op::Pick(a, index), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let ln = self.node(loss);
        if ln.rows * ln.cols != 1 {
            return Err(Error::NonScalarLoss(vec![ln.rows, ln.cols]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::Embedding { .. } => {}
            Op::MatMul(a, b) => {
                let (x, y) = (&nodes[a.0], &nodes[b.0]);
                let (m, k, n) = (x.rows, x.cols, y.cols);
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            ga[i * k + kk] += dot(grow, &y.value[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = x.value[i * k + kk];
                            if av == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        add_into(slot(grads, id, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    slot(grads, *b, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&*nodes[a.0].value, &*nodes[b.0].value);
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for ((o, &gv), &bv) in s.iter_mut().zip(g).zip(xb) {
                        *o += gv * bv;
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, g.len());
                    for ((o, &gv), &av) in s.iter_mut().zip(g).zip(xa) {
                        *o += gv * av;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let s = slot(grads, *a, g.len());
                for ((o, &gv), &y) in s.iter_mut().zip(g).zip(node.value.iter()) {
                    *o += gv * y * (T::one() - y);
                }
            }
            Op::Tanh(a) => {
                let s = slot(grads, *a, g.len());
                for ((o, &gv), &y) in s.iter_mut().zip(g).zip(node.value.iter()) {
                    *o += gv * (T::one() - y * y);
                }
            }
            Op::Softmax(a) => {
                let c = node.cols;
                let s = slot(grads, *a, g.len());
                for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                    for ((o, &gv), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (gv - dot);
                    }
                }
            }
            Op::Log(a) => {
                let x = &*nodes[a.0].value;
                let s = slot(grads, *a, g.len());
                for ((o, &gv), &xv) in s.iter_mut().zip(g).zip(x) {
                    *o += gv / xv;
                }
            }
            Op::Neg(a) => {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
            }
            Op::Square(a) => {
                let x = &*nodes[a.0].value;
                let two = T::of(2.0);
                let s = slot(grads, *a, g.len());
                for ((o, &gv), &xv) in s.iter_mut().zip(g).zip(x) {
                    *o += two * xv * gv;
                }
            }
            Op::Scale(a, f) => {
                slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o += v * *f);
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.len();
                slot(grads, *a, n).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::MeanRows(a) => {
                let x = &nodes[a.0];
                let inv = T::one() / T::of(x.rows as f64);
                let s = slot(grads, *a, x.value.len());
                for srow in s.chunks_mut(x.cols) {
                    srow.iter_mut().zip(g).for_each(|(o, &v)| *o += v * inv);
                }
            }
            Op::Concat(parts) => {
                let rows = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].cols;
                    if wants(p) {
                        let s = slot(grads, p, rows * pc);
                        for r in 0..rows {
                            let src = &g[r * node.cols + offset..r * node.cols + offset + pc];
                            add_into(&mut s[r * pc..(r + 1) * pc], src);
                        }
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        add_into(slot(grads, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let x = &nodes[a.0];
                let s = slot(grads, *a, x.value.len());
                for r in 0..x.rows {
                    let dst = &mut s[r * x.cols + start..r * x.cols + start + node.cols];
                    add_into(dst, &g[r * node.cols..(r + 1) * node.cols]);
                }
            }
            Op::Row(a, r) => {
                let x = &nodes[a.0];
                let s = slot(grads, *a, x.value.len());
                add_into(&mut s[r * x.cols..(r + 1) * x.cols], g);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.rows, node.cols);
                let s = slot(grads, *a, r * c);
                // node is r × c, input is c × r
                for i in 0..r {
                    for j in 0..c {
                        s[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Pick(a, index) => {
                let n = nodes[a.0].value.len();
                slot(grads, *a, n)[*index] += g[0];
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Dot product with eight independent partial sums so the reduction
/// vectorizes; the summation order is fixed, so results are reproducible.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max-shifted softmax over a slice.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a node, if one reached it.
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            let Some(g) = g else { continue };
            match &node.op {
                Op::Param(id) => store.get_mut(*id).accumulate_grad(g),
                Op::Embedding { table, indices } => store.get_mut(*table).accumulate_grad_rows(indices, g),
                _ => {}
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("{name} (#{})", id.0)));
                }
            }
        }
        if self.m.len() != store.len() {
            self.m = store.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (k, tensor) in store.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = tensor.grad.as_deref();
            for (i, p) in Arc::make_mut(&mut tensor.data).iter_mut().enumerate() {
                let g = grad.map_or(T::zero(), |g| g[i]);
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coordinates: usize,
    pub max_abs_error: f64,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar function `f` at `point`
/// with central differences of step `h`, coordinate by coordinate.
pub fn finite_diff_check<T, F>(f: F, point: &Tensor<T>, h: f64, tol: f64) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStep(h));
    }
    let eval = |p: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let out = f(&mut g, x)?;
        Ok(g.scalar(out).as_f64())
    };
    let mut probe = point.clone();
    probe.set_requires_grad(true);
    let mut g = Graph::new();
    let x = g.leaf(&probe);
    let out = f(&mut g, x)?;
    let grads = g.backward(out)?;
    let zeros = vec![T::zero(); point.len()];
    let analytic = grads.wrt(x).unwrap_or(&zeros).to_vec();

    let mut report = FdReport {
        coordinates: point.len(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_index: 0,
        passed: true,
    };
    let mut shifted = point.clone();
    for i in 0..point.len() {
        let orig = point.data[i];
        shifted.data_mut()[i] = T::of(orig.as_f64() + h);
        let up = eval(&shifted)?;
        shifted.data_mut()[i] = T::of(orig.as_f64() - h);
        let down = eval(&shifted)?;
        shifted.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i].as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
