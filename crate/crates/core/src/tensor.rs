//! Dense row-major tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! walks that record once, from the loss node down to the first leaf, and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! Only scalar-with-tensor broadcasting is supported. Every other shape
//! combination must be made explicit with [`Var::reshape`], [`Var::matmul`]
//! against a ones column, or [`concat_all`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable belongs to a different graph")]
    ForeignVariable,
    #[error("invalid parameter name {0:?}")]
    InvalidName(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("missing parameter {0:?}")]
    MissingParameter(String),
    #[error("labels must be 0 or 1, got {0}")]
    InvalidLabel(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An n-dimensional array of `f64` values in row-major order.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::InvalidShape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }
}

/// Split `shape` around `axis` into (outer, extent, inner) strides.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        })
    } else {
        Ok(())
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Tanh,
    /// Softmax over the last axis.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Unary(UnaryKind, usize),
    Reduce {
        kind: ReduceKind,
        input: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Bce {
        input: usize,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Probability clamp used by the binary cross-entropy node.
pub const BCE_EPSILON: f64 = 1e-7;

/// An append-only record of operations. Confined to one thread.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("id", &self.id)
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    index: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("graph", &self.graph.id)
            .field("index", &self.index)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            graph: self,
            index: nodes.len() - 1,
        }
    }

    fn owns(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(var.graph, self) && var.graph.id == self.id {
            Ok(())
        } else {
            Err(TensorError::ForeignVariable)
        }
    }

    /// Gradients of the scalar `loss` with respect to every node it reaches.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.owns(loss)?;
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.index].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar(loss_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for index in (0..=loss.index).rev() {
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let node = &nodes[index];
            propagate(&nodes, node, &upstream, &mut grads);
            grads[index] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            graph_id: self.id,
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, len: usize, f: impl Fn(&mut [f64])) {
    let slot = grads[index].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let n = out.numel();
            // Operands are either full-size or a broadcast scalar.
            let at = |t: &Tensor, i: usize| if t.numel() == n { t.data[i] } else { t.data[0] };
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for i in 0..n {
                let ia = if av.numel() == n { i } else { 0 };
                let ib = if bv.numel() == n { i } else { 0 };
                match kind {
                    BinaryKind::Add => {
                        ga[ia] += up[i];
                        gb[ib] += up[i];
                    }
                    BinaryKind::Sub => {
                        ga[ia] += up[i];
                        gb[ib] -= up[i];
                    }
                    BinaryKind::Mul => {
                        ga[ia] += up[i] * at(bv, i);
                        gb[ib] += up[i] * at(av, i);
                    }
                }
            }
            add_into(grads, *a, &ga);
            add_into(grads, *b, &gb);
        }
        Op::Scale(a, c) => {
            accumulate(grads, *a, up.len(), |g| {
                for (gi, ui) in g.iter_mut().zip(up) {
                    *gi += c * ui;
                }
            });
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += up[i * n + j] * bv.data[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            let mut gb = vec![0.0; k * n];
            for p in 0..k {
                for i in 0..m {
                    let a_ip = av.data[i * k + p];
                    for j in 0..n {
                        gb[p * n + j] += a_ip * up[i * n + j];
                    }
                }
            }
            add_into(grads, *a, &ga);
            add_into(grads, *b, &gb);
        }
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let y = out;
            let mut g = vec![0.0; x.numel()];
            match kind {
                UnaryKind::Sigmoid => {
                    for i in 0..g.len() {
                        g[i] = up[i] * y.data[i] * (1.0 - y.data[i]);
                    }
                }
                UnaryKind::Tanh => {
                    for i in 0..g.len() {
                        g[i] = up[i] * (1.0 - y.data[i] * y.data[i]);
                    }
                }
                UnaryKind::Relu => {
                    for i in 0..g.len() {
                        g[i] = if x.data[i] > 0.0 { up[i] } else { 0.0 };
                    }
                }
                UnaryKind::Softmax => {
                    let cols = *y.shape.last().unwrap_or(&1);
                    for r in 0..y.numel() / cols {
                        let row = r * cols..(r + 1) * cols;
                        let dot: f64 = up[row.clone()]
                            .iter()
                            .zip(&y.data[row.clone()])
                            .map(|(u, v)| u * v)
                            .sum();
                        for i in row {
                            g[i] = y.data[i] * (up[i] - dot);
                        }
                    }
                }
            }
            add_into(grads, *a, &g);
        }
        Op::Reduce {
            kind,
            input,
            axis,
            argmax,
        } => {
            let x = &nodes[*input].value;
            let (outer, extent, inner) = axis_strides(&x.shape, *axis);
            let mut g = vec![0.0; x.numel()];
            for o in 0..outer {
                for j in 0..inner {
                    let u = up[o * inner + j];
                    match kind {
                        ReduceKind::Max => {
                            let i = argmax[o * inner + j];
                            g[(o * extent + i) * inner + j] += u;
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean {
                                1.0 / extent as f64
                            } else {
                                1.0
                            };
                            for i in 0..extent {
                                g[(o * extent + i) * inner + j] += u * scale;
                            }
                        }
                    }
                }
            }
            add_into(grads, *input, &g);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_strides(&out.shape, *axis);
            let mut offset = 0;
            for &input in inputs {
                let extent = nodes[input].value.shape[*axis];
                let mut g = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    let dst = o * extent * inner;
                    g[dst..dst + extent * inner].copy_from_slice(&up[src..src + extent * inner]);
                }
                add_into(grads, input, &g);
                offset += extent;
            }
        }
        Op::Slice { input, axis, start } => {
            let x = &nodes[*input].value;
            let (outer, extent, inner) = axis_strides(&x.shape, *axis);
            let len = out.shape[*axis];
            let mut g = vec![0.0; x.numel()];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&up[src..src + len * inner]);
            }
            add_into(grads, *input, &g);
        }
        Op::Reshape(a) => add_into(grads, *a, up),
        Op::Transpose(a) => {
            let (r, c) = (out.shape[0], out.shape[1]);
            let mut g = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    g[j * r + i] = up[i * c + j];
                }
            }
            add_into(grads, *a, &g);
        }
        Op::Bce { input, labels } => {
            let p = &nodes[*input].value;
            let n = labels.len() as f64;
            let mut g = vec![0.0; p.numel()];
            for (i, &y) in labels.iter().enumerate() {
                let raw = p.data[i];
                // The clamp has zero slope outside [eps, 1 - eps].
                if raw < BCE_EPSILON || raw > 1.0 - BCE_EPSILON {
                    continue;
                }
                g[i] = up[0] * (-(y / raw) + (1.0 - y) / (1.0 - raw)) / n;
            }
            add_into(grads, *input, &g);
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], index: usize, g: &[f64]) {
    accumulate(grads, index, g.len(), |slot| {
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    });
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    graph_id: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Result<Option<&Tensor>> {
        if var.graph.id != self.graph_id {
            return Err(TensorError::ForeignVariable);
        }
        Ok(self.grads.get(var.index).and_then(Option::as_ref))
    }

    /// Gradient for `var`, with zeros standing in for unreachable nodes.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        match self.get(var)? {
            Some(t) => Ok(t.clone()),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.index].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.index].value.shape.clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.nodes.borrow()[self.index].value.item()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.index].value)
    }

    fn same_graph(&self, other: Var<'_>) -> Result<()> {
        self.graph.owns(other)
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.index].value;
            let b = &nodes[other.index].value;
            let shape = if a.shape == b.shape || b.numel() == 1 {
                a.shape.clone()
            } else if a.numel() == 1 {
                b.shape.clone()
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: "elementwise",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            let n: usize = shape.iter().product();
            let pick = |t: &Tensor, i: usize| if t.numel() == n { t.data[i] } else { t.data[0] };
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (pick(a, i), pick(b, i));
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect();
            Tensor { shape, data }
        };
        Ok(self
            .graph
            .push(value, Op::Binary(kind, self.index, other.index)))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let value = self.with_value(|t| t.map(|v| v * factor));
        self.graph.push(value, Op::Scale(self.index, factor))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.index].value;
            let b = &nodes[other.index].value;
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let out_row = &mut data[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = a.data[i * k + p];
                    let b_row = &b.data[p * n..(p + 1) * n];
                    for (o, bv) in out_row.iter_mut().zip(b_row) {
                        *o += a_ip * bv;
                    }
                }
            }
            Tensor {
                shape: vec![m, n],
                data,
            }
        };
        Ok(self
            .graph
            .push(value, Op::MatMul(self.index, other.index)))
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'g>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            if t.numel() == 0 {
                return Err(TensorError::InvalidShape("empty tensor".into()));
            }
            Ok(match kind {
                UnaryKind::Sigmoid => t.map(sigmoid),
                UnaryKind::Relu => t.map(|v| v.max(0.0)),
                UnaryKind::Tanh => t.map(f64::tanh),
                UnaryKind::Softmax => {
                    let cols = *t.shape.last().unwrap_or(&1);
                    let mut data = t.data.clone();
                    for row in data.chunks_mut(cols) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            total += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= total;
                        }
                    }
                    Tensor {
                        shape: t.shape.clone(),
                        data,
                    }
                }
            })
        })?;
        Ok(self.graph.push(value, Op::Unary(kind, self.index)))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Softmax)
    }

    /// Reduce along `axis`, removing it. Max sends its gradient to the
    /// lowest index among tied maxima.
    pub fn reduce(self, kind: ReduceKind, axis: usize) -> Result<Var<'g>> {
        let (value, argmax) = self.with_value(|t| -> Result<(Tensor, Vec<usize>)> {
            check_axis(&t.shape, axis)?;
            let (outer, extent, inner) = axis_strides(&t.shape, axis);
            let mut data = vec![0.0; outer * inner];
            let mut argmax = Vec::new();
            if kind == ReduceKind::Max {
                argmax = vec![0; outer * inner];
            }
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| t.data[(o * extent + i) * inner + j];
                    let slot = o * inner + j;
                    match kind {
                        ReduceKind::Max => {
                            let mut best = 0;
                            for i in 1..extent {
                                if at(i) > at(best) {
                                    best = i;
                                }
                            }
                            data[slot] = at(best);
                            argmax[slot] = best;
                        }
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let mut acc = 0.0;
                            for i in 0..extent {
                                acc += at(i);
                            }
                            if kind == ReduceKind::Mean {
                                acc /= extent as f64;
                            }
                            data[slot] = acc;
                        }
                    }
                }
            }
            let mut shape = t.shape.clone();
            shape.remove(axis);
            Ok((Tensor { shape, data }, argmax))
        })?;
        Ok(self.graph.push(
            value,
            Op::Reduce {
                kind,
                input: self.index,
                axis,
                argmax,
            },
        ))
    }

    pub fn max(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Max, axis)
    }

    pub fn sum(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Mean, axis)
    }

    pub fn concat(self, other: Var<'g>, axis: usize) -> Result<Var<'g>> {
        concat_all(&[self, other], axis)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            check_axis(&t.shape, axis)?;
            let (outer, extent, inner) = axis_strides(&t.shape, axis);
            if len == 0 || start + len > extent {
                return Err(TensorError::InvalidShape(format!(
                    "slice {start}..{} out of extent {extent}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * extent + start) * inner;
                data.extend_from_slice(&t.data[from..from + len * inner]);
            }
            let mut shape = t.shape.clone();
            shape[axis] = len;
            Ok(Tensor { shape, data })
        })?;
        Ok(self.graph.push(
            value,
            Op::Slice {
                input: self.index,
                axis,
                start,
            },
        ))
    }

    /// Row `i` of a rank-2 tensor, as a `[1, cols]` matrix.
    pub fn row(self, i: usize) -> Result<Var<'g>> {
        self.slice(0, i, 1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.with_value(|t| t.reshaped(shape))?;
        Ok(self.graph.push(value, Op::Reshape(self.index)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            if t.rank() != 2 {
                return Err(TensorError::InvalidShape(format!(
                    "transpose needs rank 2, got {:?}",
                    t.shape
                )));
            }
            let (r, c) = (t.shape[0], t.shape[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data[i * c + j];
                }
            }
            Ok(Tensor {
                shape: vec![c, r],
                data,
            })
        })?;
        Ok(self.graph.push(value, Op::Transpose(self.index)))
    }

    /// Mean binary cross-entropy of probabilities `self` against 0/1 labels.
    /// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
    pub fn bce(self, labels: &[f64]) -> Result<Var<'g>> {
        let value = self.with_value(|p| -> Result<Tensor> {
            if labels.is_empty() || p.numel() != labels.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce",
                    lhs: p.shape.clone(),
                    rhs: vec![labels.len()],
                });
            }
            Ok(Tensor::scalar(bce_value(&p.data, labels)?))
        })?;
        Ok(self.graph.push(
            value,
            Op::Bce {
                input: self.index,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub(crate) fn bce_value(probs: &[f64], labels: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(TensorError::InvalidLabel(y));
        }
        let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        total += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(-total / labels.len() as f64)
}

/// Concatenate `parts` along `axis`; all other extents must agree.
pub fn concat_all<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = *parts
        .first()
        .ok_or_else(|| TensorError::InvalidShape("concat of nothing".into()))?;
    for p in &parts[1..] {
        first.same_graph(*p)?;
    }
    let graph = first.graph;
    let value = {
        let nodes = graph.nodes.borrow();
        let base = &nodes[first.index].value;
        check_axis(&base.shape, axis)?;
        let mut total = 0;
        for p in parts {
            let s = &nodes[p.index].value.shape;
            let compatible = s.len() == base.shape.len()
                && s.iter()
                    .zip(&base.shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_strides(&base.shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.index].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.shape.clone();
        shape[axis] = total;
        Tensor { shape, data }
    };
    Ok(graph.push(
        value,
        Op::Concat {
            inputs: parts.iter().map(|p| p.index).collect(),
            axis,
        },
    ))
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.is_ascii()
}

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !valid_name(&name) {
            return Err(TensorError::InvalidName(name));
        }
        if self.tensors.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replace an existing tensor, keeping its name.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(TensorError::MissingParameter(name.to_string())),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(&f)))
                .collect(),
        }
    }

    /// Insert every tensor as a leaf of `graph`.
    pub fn register<'g>(&self, graph: &'g Graph) -> ParamVars<'g> {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a registered [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct ParamVars<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))
    }

    /// Collect the gradient of every registered parameter, zero-filled where
    /// the loss does not reach it.
    pub fn gradients(&self, grads: &Gradients) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), grads.wrt(*var)?)?;
        }
        Ok(out)
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of `f` at `params`, measured per coordinate as
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F, E>(f: F, params: &ParameterSet, eps: f64) -> std::result::Result<f64, E>
where
    F: for<'g> Fn(&'g Graph, &ParamVars<'g>) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let analytic = {
        let graph = Graph::new();
        let vars = params.register(&graph);
        let loss = f(&graph, &vars)?;
        let grads = graph.backward(loss)?;
        vars.gradients(&grads)?
    };
    let eval = |p: &ParameterSet| -> std::result::Result<f64, E> {
        let graph = Graph::new();
        let vars = p.register(&graph);
        Ok(f(&graph, &vars)?.item()?)
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map_or(0, Tensor::numel);
        for i in 0..n {
            let original = params.get(name).map(|t| t.data[i]).unwrap_or_default();
            probe.get_mut(name).expect("cloned").data[i] = original + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data[i] = original - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(name).expect("same names").data[i];
            let err = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unary_examples() {
        let g = Graph::new();
        assert_eq!(g.scalar(0.0).sigmoid().unwrap().item().unwrap(), 0.5);
        let r = g.leaf(t(&[2], &[-1.0, 2.0])).relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 2.0]);
        let s = g.leaf(t(&[2], &[0.0, 0.0])).softmax().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn empty_tensor_is_rejected() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::new();
        let eye = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = g.leaf(t(&[2, 1], &[1.0, 1.0]));
        let prod = m.matmul(ones).unwrap().value();
        assert_eq!(prod.shape(), &[2, 1]);
        assert_eq!(prod.data(), &[3.0, 7.0]);

        let a = g.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.leaf(Tensor::zeros(&[4, 2]).unwrap());
        match a.matmul(b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::new();
        let v = g.leaf(t(&[3], &[1.0, 5.0, 3.0]));
        assert_eq!(v.max(0).unwrap().item().unwrap(), 5.0);
        let m = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.sum(0).unwrap().value().data(), &[4.0, 6.0]);
        let c = g.leaf(t(&[3], &[2.0, 2.0, 2.0]));
        assert_eq!(c.mean(0).unwrap().item().unwrap(), 2.0);
        assert!(matches!(
            m.sum(2),
            Err(TensorError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let g = Graph::new();
        let v = g.leaf(t(&[4], &[1.0, 7.0, 7.0, 2.0]));
        let loss = v.max(0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_examples() {
        let g = Graph::new();
        let a = g.leaf(t(&[1], &[1.0]));
        let b = g.leaf(t(&[1], &[2.0]));
        assert_eq!(a.concat(b, 0).unwrap().value().data(), &[1.0, 2.0]);
        let x = g.leaf(Tensor::zeros(&[2, 3]).unwrap());
        let y = g.leaf(Tensor::zeros(&[2, 5]).unwrap());
        assert_eq!(x.concat(y, 1).unwrap().shape(), vec![2, 8]);
        let z = g.leaf(Tensor::zeros(&[3, 3]).unwrap());
        assert!(x.concat(z, 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let x = g.scalar(3.0);
        let loss = x.mul(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item().unwrap(), 6.0);
        assert_eq!(grads.wrt(loss).unwrap().item().unwrap(), 1.0);

        let g = Graph::new();
        let w = g.scalar(0.0);
        let x = g.scalar(1.0);
        let loss = w.mul(x).unwrap().sigmoid().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let g = Graph::new();
        let v = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(TensorError::NotScalar(_))));

        let other = Graph::new();
        let s = other.scalar(1.0);
        assert!(matches!(g.backward(s), Err(TensorError::ForeignVariable)));
        assert!(matches!(v.add(s), Err(TensorError::ForeignVariable)));
    }

    #[test]
    fn scalar_broadcast_only() {
        let g = Graph::new();
        let v = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.scalar(10.0);
        assert_eq!(v.add(s).unwrap().value().data(), &[11.0, 12.0, 13.0, 14.0]);
        assert_eq!(s.mul(v).unwrap().value().data(), &[10.0, 20.0, 30.0, 40.0]);
        let row = g.leaf(t(&[1, 2], &[1.0, 1.0]));
        assert!(v.add(row).is_err());
    }

    #[test]
    fn bce_matches_direct_formula() {
        let g = Graph::new();
        let p = g.leaf(t(&[2], &[0.9, 0.9]));
        let loss = p.bce(&[1.0, 0.0]).unwrap().item().unwrap();
        let expected = (-(0.9f64).ln() - (0.1f64).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!(p.bce(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn quadratic_bowl_grad_check() {
        let mut params = ParameterSet::new();
        params
            .insert("w", t(&[3], &[0.3, -1.2, 2.5]))
            .unwrap();
        let err = grad_check(
            |_, vars| {
                let w = vars.get("w")?;
                w.mul(w)?.sum(0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let mut params = ParameterSet::new();
        params.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        assert!(grad_check::<_, TensorError>(|_, vars| vars.get("w"), &params, 1e-5).is_err());
    }

    #[test]
    fn parameter_names_are_validated() {
        let mut params = ParameterSet::new();
        assert!(params.insert("", Tensor::scalar(1.0)).is_err());
        assert!(params.insert("wé", Tensor::scalar(1.0)).is_err());
        params.insert("b", Tensor::scalar(1.0)).unwrap();
        params.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            params.insert("a", Tensor::scalar(2.0)),
            Err(TensorError::DuplicateName(_))
        ));
        assert_eq!(params.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
