//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Every backward rule is itself expressed through the forward op basis, so
//! the nodes returned by [`grad`] with `create_graph = true` are ordinary
//! differentiable nodes and gradients of gradients fall out of a second
//! `grad` call. Graphs are confined to a single thread (`Rc`-based); run
//! independent graphs on independent threads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Dense array shape, at most a few dimensions. A scalar is `[1]`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn vector(n: usize) -> Self {
        Shape(vec![n])
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape(vec![rows, cols])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn rows(&self) -> usize {
        assert!(self.0.len() == 2, "rows: expected 2-d shape, got {}", self);
        self.0[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.0.len() == 2, "cols: expected 2-d shape, got {}", self);
        self.0[1]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{}", d)?;
        }
        write!(f, "]")
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Matmul,
    Transpose,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    XLogX,
    XLogXGrad,
    SumAll,
    BroadcastScalar,
    SumAxis0,
    SumAxis1,
    BroadcastRows,
    BroadcastCols,
    ScaleRows,
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { start: usize },
    SliceRows { start: usize },
    EmbedCols { start: usize },
    EmbedRows { start: usize },
    GatherRows(Rc<Vec<usize>>),
    ScatterAddRows(Rc<Vec<usize>>),
    Reshape,
}

struct Inner {
    id: u64,
    shape: Shape,
    values: Vec<f64>,
    op: Op,
    parents: Vec<Node>,
    requires_grad: bool,
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Node(Rc<Inner>);

fn make(shape: Shape, values: Vec<f64>, op: Op, parents: Vec<Node>) -> Node {
    debug_assert_eq!(shape.numel(), values.len());
    let requires_grad = parents.iter().any(|p| p.requires_grad());
    Node(Rc::new(Inner {
        id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        shape,
        values,
        op,
        parents,
        requires_grad,
    }))
}

impl Node {
    pub fn constant(shape: Shape, values: Vec<f64>) -> Node {
        assert_eq!(
            shape.numel(),
            values.len(),
            "constant: shape {} does not match {} values",
            shape,
            values.len()
        );
        make(shape, values, Op::Leaf, vec![])
    }

    /// Leaf node participating in gradient computation.
    pub fn param(shape: Shape, values: Vec<f64>) -> Node {
        assert_eq!(
            shape.numel(),
            values.len(),
            "param: shape {} does not match {} values",
            shape,
            values.len()
        );
        Node(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values,
            op: Op::Leaf,
            parents: vec![],
            requires_grad: true,
        }))
    }

    pub fn scalar(v: f64) -> Node {
        Node::constant(Shape::scalar(), vec![v])
    }

    pub fn zeros(shape: Shape) -> Node {
        let n = shape.numel();
        Node::constant(shape, vec![0.0; n])
    }

    pub fn ones(shape: Shape) -> Node {
        let n = shape.numel();
        Node::constant(shape, vec![1.0; n])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn value(&self) -> f64 {
        assert!(
            self.0.shape.is_scalar(),
            "value: node is not scalar, shape {}",
            self.0.shape
        );
        self.0.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.0.values.iter().all(|v| v.is_finite())
    }

    /// Copy of the values with the graph cut off.
    pub fn detach(&self) -> Node {
        Node::constant(self.0.shape.clone(), self.0.values.clone())
    }

    fn same_shape(&self, other: &Node, op: &str) -> Shape {
        assert!(
            self.0.shape == other.0.shape,
            "{}: shape mismatch {} vs {}",
            op,
            self.0.shape,
            other.0.shape
        );
        self.0.shape.clone()
    }

    pub fn add(&self, other: &Node) -> Node {
        let shape = self.same_shape(other, "add");
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        make(shape, values, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Node) -> Node {
        let shape = self.same_shape(other, "sub");
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        make(shape, values, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Node) -> Node {
        let shape = self.same_shape(other, "mul");
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        make(shape, values, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Node) -> Node {
        let shape = self.same_shape(other, "div");
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a / b)
            .collect();
        make(shape, values, Op::Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Node {
        let values = self.values().iter().map(|a| -a).collect();
        make(self.0.shape.clone(), values, Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Node {
        let values = self.values().iter().map(|a| a * c).collect();
        make(self.0.shape.clone(), values, Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Node {
        let values = self.values().iter().map(|a| a + c).collect();
        make(
            self.0.shape.clone(),
            values,
            Op::AddScalar,
            vec![self.clone()],
        )
    }

    pub fn matmul(&self, other: &Node) -> Node {
        let (m, k) = (self.shape().rows(), self.shape().cols());
        let (k2, n) = (other.shape().rows(), other.shape().cols());
        assert!(
            k == k2,
            "matmul: shape mismatch {} vs {}",
            self.shape(),
            other.shape()
        );
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        make(
            Shape::matrix(m, n),
            out,
            Op::Matmul,
            vec![self.clone(), other.clone()],
        )
    }

    pub fn transpose(&self) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        let a = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        make(Shape::matrix(n, m), out, Op::Transpose, vec![self.clone()])
    }

    pub fn exp(&self) -> Node {
        let values = self.values().iter().map(|a| a.exp()).collect();
        make(self.0.shape.clone(), values, Op::Exp, vec![self.clone()])
    }

    pub fn log(&self) -> Node {
        assert!(
            self.values().iter().all(|&a| a > 0.0),
            "log: non-positive input rejected"
        );
        let values = self.values().iter().map(|a| a.ln()).collect();
        make(self.0.shape.clone(), values, Op::Log, vec![self.clone()])
    }

    pub fn tanh(&self) -> Node {
        let values = self.values().iter().map(|a| a.tanh()).collect();
        make(self.0.shape.clone(), values, Op::Tanh, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Node {
        let values = self.values().iter().map(|a| sigmoid_f(*a)).collect();
        make(self.0.shape.clone(), values, Op::Sigmoid, vec![self.clone()])
    }

    pub fn softplus(&self) -> Node {
        let values = self.values().iter().map(|a| softplus_f(*a)).collect();
        make(
            self.0.shape.clone(),
            values,
            Op::Softplus,
            vec![self.clone()],
        )
    }

    /// x * ln(x) with the convention 0 * ln 0 = 0. Inputs must be >= 0.
    pub fn xlogx(&self) -> Node {
        assert!(
            self.values().iter().all(|&a| a >= 0.0),
            "xlogx: negative input rejected"
        );
        let values = self
            .values()
            .iter()
            .map(|&a| if a == 0.0 { 0.0 } else { a * a.ln() })
            .collect();
        make(self.0.shape.clone(), values, Op::XLogX, vec![self.clone()])
    }

    fn xlogx_grad(&self) -> Node {
        let values = self
            .values()
            .iter()
            .map(|&a| if a == 0.0 { 0.0 } else { a.ln() + 1.0 })
            .collect();
        make(
            self.0.shape.clone(),
            values,
            Op::XLogXGrad,
            vec![self.clone()],
        )
    }

    pub fn sum_all(&self) -> Node {
        let s: f64 = self.values().iter().sum();
        make(Shape::scalar(), vec![s], Op::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Node {
        let n = self.shape().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn broadcast_scalar(&self, shape: Shape) -> Node {
        assert!(self.shape().is_scalar(), "broadcast_scalar: not a scalar");
        let n = shape.numel();
        make(
            shape,
            vec![self.value(); n],
            Op::BroadcastScalar,
            vec![self.clone()],
        )
    }

    /// (m x n) -> (n): column sums.
    pub fn sum_axis0(&self) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        let a = self.values();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += a[i * n + j];
            }
        }
        make(Shape::vector(n), out, Op::SumAxis0, vec![self.clone()])
    }

    /// (m x n) -> (m): row sums.
    pub fn sum_axis1(&self) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        let a = self.values();
        let mut out = vec![0.0; m];
        for i in 0..m {
            for j in 0..n {
                out[i] += a[i * n + j];
            }
        }
        make(Shape::vector(m), out, Op::SumAxis1, vec![self.clone()])
    }

    /// (n) -> (rows x n): repeat as rows.
    pub fn broadcast_rows(&self, rows: usize) -> Node {
        assert!(self.shape().0.len() == 1, "broadcast_rows: expected vector");
        let n = self.shape().numel();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.values());
        }
        make(
            Shape::matrix(rows, n),
            out,
            Op::BroadcastRows,
            vec![self.clone()],
        )
    }

    /// (m) -> (m x cols): repeat as columns.
    pub fn broadcast_cols(&self, cols: usize) -> Node {
        assert!(self.shape().0.len() == 1, "broadcast_cols: expected vector");
        let m = self.shape().numel();
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            for _ in 0..cols {
                out.push(self.values()[i]);
            }
        }
        make(
            Shape::matrix(m, cols),
            out,
            Op::BroadcastCols,
            vec![self.clone()],
        )
    }

    /// Multiply row i of a (m x n) matrix by v[i].
    pub fn scale_rows(&self, v: &Node) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        assert!(
            v.shape() == &Shape::vector(m),
            "scale_rows: shape mismatch {} vs {}",
            self.shape(),
            v.shape()
        );
        let a = self.values();
        let w = v.values();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(a[i * n + j] * w[i]);
            }
        }
        make(
            Shape::matrix(m, n),
            out,
            Op::ScaleRows,
            vec![self.clone(), v.clone()],
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        assert!(
            start + len <= n,
            "slice_cols: range {}..{} out of {} columns",
            start,
            start + len,
            n
        );
        let a = self.values();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&a[i * n + start..i * n + start + len]);
        }
        make(
            Shape::matrix(m, len),
            out,
            Op::SliceCols { start },
            vec![self.clone()],
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        assert!(
            start + len <= m,
            "slice_rows: range {}..{} out of {} rows",
            start,
            start + len,
            m
        );
        let out = self.values()[start * n..(start + len) * n].to_vec();
        make(
            Shape::matrix(len, n),
            out,
            Op::SliceRows { start },
            vec![self.clone()],
        )
    }

    /// Place this (m x len) block into an (m x total) zero matrix at column `start`.
    pub fn embed_cols(&self, start: usize, total: usize) -> Node {
        let (m, len) = (self.shape().rows(), self.shape().cols());
        assert!(start + len <= total, "embed_cols: block does not fit");
        let a = self.values();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            out[i * total + start..i * total + start + len]
                .copy_from_slice(&a[i * len..(i + 1) * len]);
        }
        make(
            Shape::matrix(m, total),
            out,
            Op::EmbedCols { start },
            vec![self.clone()],
        )
    }

    pub fn embed_rows(&self, start: usize, total: usize) -> Node {
        let (len, n) = (self.shape().rows(), self.shape().cols());
        assert!(start + len <= total, "embed_rows: block does not fit");
        let mut out = vec![0.0; total * n];
        out[start * n..(start + len) * n].copy_from_slice(self.values());
        make(
            Shape::matrix(total, n),
            out,
            Op::EmbedRows { start },
            vec![self.clone()],
        )
    }

    /// Select rows of a (rows x n) matrix; used for embedding lookup.
    pub fn gather_rows(&self, indices: &Rc<Vec<usize>>) -> Node {
        let (rows, n) = (self.shape().rows(), self.shape().cols());
        let a = self.values();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &ix in indices.iter() {
            assert!(ix < rows, "gather_rows: index {} out of {} rows", ix, rows);
            out.extend_from_slice(&a[ix * n..(ix + 1) * n]);
        }
        make(
            Shape::matrix(indices.len(), n),
            out,
            Op::GatherRows(indices.clone()),
            vec![self.clone()],
        )
    }

    /// Add row i of this matrix into row indices[i] of an (rows x n) zero matrix.
    pub fn scatter_add_rows(&self, indices: &Rc<Vec<usize>>, rows: usize) -> Node {
        let (m, n) = (self.shape().rows(), self.shape().cols());
        assert_eq!(m, indices.len(), "scatter_add_rows: index count mismatch");
        let a = self.values();
        let mut out = vec![0.0; rows * n];
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < rows, "scatter_add_rows: index {} out of bounds", ix);
            for j in 0..n {
                out[ix * n + j] += a[i * n + j];
            }
        }
        make(
            Shape::matrix(rows, n),
            out,
            Op::ScatterAddRows(indices.clone()),
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: Shape) -> Node {
        assert_eq!(
            self.shape().numel(),
            shape.numel(),
            "reshape: element count mismatch {} vs {}",
            self.shape(),
            shape
        );
        make(
            shape,
            self.values().to_vec(),
            Op::Reshape,
            vec![self.clone()],
        )
    }
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with max-subtraction for stability. The subtracted max
/// is detached; softmax is shift-invariant so values and gradients are exact.
pub fn softmax_rows(x: &Node) -> Node {
    let (m, n) = (x.shape().rows(), x.shape().cols());
    let maxes = row_max_constant(x);
    let shifted = x.sub(&maxes.broadcast_cols(n));
    let e = shifted.exp();
    let denom = e.sum_axis1();
    let inv = Node::ones(Shape::vector(m)).div(&denom);
    e.scale_rows(&inv)
}

/// Row-wise log-softmax, fused so no log(0) can occur.
pub fn log_softmax_rows(x: &Node) -> Node {
    let n = x.shape().cols();
    let maxes = row_max_constant(x);
    let shifted = x.sub(&maxes.broadcast_cols(n));
    let lse = shifted.exp().sum_axis1().log();
    shifted.sub(&lse.broadcast_cols(n))
}

fn row_max_constant(x: &Node) -> Node {
    let (m, n) = (x.shape().rows(), x.shape().cols());
    let a = x.values();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        out.push(
            a[i * n..(i + 1) * n]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Node::constant(Shape::vector(m), out)
}

/// Softmax of a 1-d vector.
pub fn softmax_vec(x: &Node) -> Node {
    let n = x.shape().numel();
    softmax_rows(&x.reshape(Shape::matrix(1, n))).reshape(Shape::vector(n))
}

/// Cross-entropy with soft targets, averaged over rows with the given
/// per-row weights. The target participates in the graph.
pub fn masked_soft_ce(logits: &Node, target: &Node, weights: &[f64]) -> Node {
    assert!(
        logits.shape() == target.shape(),
        "masked_soft_ce: shape mismatch {} vs {}",
        logits.shape(),
        target.shape()
    );
    let m = logits.shape().rows();
    assert_eq!(m, weights.len(), "masked_soft_ce: weight count mismatch");
    let wsum: f64 = weights.iter().sum();
    assert!(wsum > 0.0, "masked_soft_ce: all rows masked out");
    let ls = log_softmax_rows(logits);
    let per_row = target.mul(&ls).sum_axis1().neg();
    let w = Node::constant(Shape::vector(m), weights.to_vec());
    per_row.mul(&w).sum_all().scale(1.0 / wsum)
}

/// One-hot constant rows, width `n`.
pub fn one_hot_rows(indices: &[usize], n: usize) -> Node {
    let mut values = vec![0.0; indices.len() * n];
    for (i, &ix) in indices.iter().enumerate() {
        assert!(ix < n, "one_hot_rows: index {} out of width {}", ix, n);
        values[i * n + ix] = 1.0;
    }
    Node::constant(Shape::matrix(indices.len(), n), values)
}

/// Binary cross-entropy from logits against constant 0/1 targets, mean over
/// all entries.
pub fn bce_with_logits(logits: &Node, targets: &Node) -> Node {
    logits
        .softplus()
        .sub(&logits.mul(targets))
        .mean_all()
}

/// Ordered name -> Node map. Used both for trainable parameter sets and for
/// the gradient maps returned by [`grad`].
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Node)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: vec![] }
    }

    pub fn insert(&mut self, name: &str, node: Node) {
        assert!(
            self.get(name).is_none(),
            "ParamSet: duplicate name {:?}",
            name
        );
        self.entries.push((name.to_string(), node));
    }

    pub fn set(&mut self, name: &str, node: Node) {
        for (n, v) in self.entries.iter_mut() {
            if n == name {
                *v = node;
                return;
            }
        }
        self.entries.push((name.to_string(), node));
    }

    pub fn get(&self, name: &str) -> Option<&Node> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn at(&self, name: &str) -> &Node {
        self.get(name)
            .unwrap_or_else(|| panic!("ParamSet: missing entry {:?}", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.shape().numel()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Flatten all entry values in iteration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, v) in &self.entries {
            out.extend_from_slice(v.values());
        }
        out
    }

    /// New set of leaf params with the same names/shapes and the given flat values.
    pub fn with_flat_values(&self, flat: &[f64]) -> ParamSet {
        assert_eq!(flat.len(), self.num_values());
        let mut out = ParamSet::new();
        let mut off = 0;
        for (n, v) in &self.entries {
            let k = v.shape().numel();
            out.insert(n, Node::param(v.shape().clone(), flat[off..off + k].to_vec()));
            off += k;
        }
        out
    }

    /// Re-leaf: fresh parameter leaves carrying the current values.
    pub fn releaf(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, v) in &self.entries {
            out.insert(n, Node::param(v.shape().clone(), v.values().to_vec()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, v)| v.values().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// In-place SGD step: theta <- theta - lr * grad. Creates fresh leaves.
    pub fn sgd_step(&mut self, grads: &ParamSet, lr: f64) {
        let mut out = ParamSet::new();
        for (n, v) in &self.entries {
            let g = grads.at(n);
            let vals: Vec<f64> = v
                .values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| a - lr * b)
                .collect();
            out.insert(n, Node::param(v.shape().clone(), vals));
        }
        *self = out;
    }
}

impl fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_map();
        for (name, node) in &self.entries {
            d.entry(&name, node.shape());
        }
        d.finish()
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = &'a (String, Node);
    type IntoIter = std::slice::Iter<'a, (String, Node)>;
    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Gradient of a scalar loss with respect to every entry of `wrt`.
///
/// With `create_graph = true` the returned gradients stay attached to the
/// graph, so taking `grad` of them again yields second derivatives. Entries
/// not on a path to the loss get an exact zero gradient.
pub fn grad(loss: &Node, wrt: &ParamSet, create_graph: bool) -> ParamSet {
    assert!(
        loss.shape().is_scalar(),
        "grad: loss must be scalar, got shape {}",
        loss.shape()
    );
    let mut out = ParamSet::new();
    if !loss.requires_grad() {
        for (n, v) in wrt {
            out.insert(n, Node::zeros(v.shape().clone()));
        }
        return out;
    }

    // Iterative post-order topological sort over the requires_grad subgraph.
    let mut topo: Vec<Node> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Node, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, pi)) = stack.pop() {
        let parents = &node.0.parents;
        if pi < parents.len() {
            let next = parents[pi].clone();
            stack.push((node, pi + 1));
            if next.requires_grad() && !visited.contains(&next.id()) {
                visited.insert(next.id());
                stack.push((next, 0));
            }
        } else {
            topo.push(node);
        }
    }

    let mut grads: HashMap<u64, Node> = HashMap::new();
    grads.insert(loss.id(), Node::ones(Shape::scalar()));

    for node in topo.iter().rev() {
        let g = match grads.get(&node.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        for (pi, pg) in backward_one(node, &g) {
            let parent = &node.0.parents[pi];
            if !parent.requires_grad() {
                continue;
            }
            match grads.remove(&parent.id()) {
                Some(acc) => {
                    grads.insert(parent.id(), acc.add(&pg));
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    for (n, v) in wrt {
        let g = match grads.get(&v.id()) {
            Some(g) => {
                if create_graph {
                    g.clone()
                } else {
                    g.detach()
                }
            }
            None => Node::zeros(v.shape().clone()),
        };
        out.insert(n, g);
    }
    out
}

fn backward_one(node: &Node, g: &Node) -> Vec<(usize, Node)> {
    let p = &node.0.parents;
    match &node.0.op {
        Op::Leaf => vec![],
        Op::Add => vec![(0, g.clone()), (1, g.clone())],
        Op::Sub => vec![(0, g.clone()), (1, g.neg())],
        Op::Mul => vec![(0, g.mul(&p[1])), (1, g.mul(&p[0]))],
        Op::Div => {
            let da = g.div(&p[1]);
            let db = g.mul(&p[0]).div(&p[1].mul(&p[1])).neg();
            vec![(0, da), (1, db)]
        }
        Op::Neg => vec![(0, g.neg())],
        Op::Scale(c) => vec![(0, g.scale(*c))],
        Op::AddScalar => vec![(0, g.clone())],
        Op::Matmul => vec![
            (0, g.matmul(&p[1].transpose())),
            (1, p[0].transpose().matmul(g)),
        ],
        Op::Transpose => vec![(0, g.transpose())],
        Op::Exp => vec![(0, g.mul(&p[0].exp()))],
        Op::Log => vec![(0, g.div(&p[0]))],
        Op::Tanh => {
            let t = p[0].tanh();
            let one_minus = Node::ones(t.shape().clone()).sub(&t.mul(&t));
            vec![(0, g.mul(&one_minus))]
        }
        Op::Sigmoid => {
            let s = p[0].sigmoid();
            let d = s.mul(&Node::ones(s.shape().clone()).sub(&s));
            vec![(0, g.mul(&d))]
        }
        Op::Softplus => vec![(0, g.mul(&p[0].sigmoid()))],
        Op::XLogX => vec![(0, g.mul(&p[0].xlogx_grad()))],
        Op::XLogXGrad => vec![(0, g.div(&p[0]))],
        Op::SumAll => vec![(0, g.broadcast_scalar(p[0].shape().clone()))],
        Op::BroadcastScalar => vec![(0, g.sum_all())],
        Op::SumAxis0 => vec![(0, g.broadcast_rows(p[0].shape().rows()))],
        Op::SumAxis1 => vec![(0, g.broadcast_cols(p[0].shape().cols()))],
        Op::BroadcastRows => vec![(0, g.sum_axis0())],
        Op::BroadcastCols => vec![(0, g.sum_axis1())],
        Op::ScaleRows => vec![
            (0, g.scale_rows(&p[1])),
            (1, g.mul(&p[0]).sum_axis1()),
        ],
        Op::ConcatCols(widths) => {
            let mut out = vec![];
            let mut off = 0;
            for (i, w) in widths.iter().enumerate() {
                out.push((i, g.slice_cols(off, *w)));
                off += w;
            }
            out
        }
        Op::ConcatRows(heights) => {
            let mut out = vec![];
            let mut off = 0;
            for (i, h) in heights.iter().enumerate() {
                out.push((i, g.slice_rows(off, *h)));
                off += h;
            }
            out
        }
        Op::SliceCols { start } => {
            vec![(0, g.embed_cols(*start, p[0].shape().cols()))]
        }
        Op::SliceRows { start } => {
            vec![(0, g.embed_rows(*start, p[0].shape().rows()))]
        }
        Op::EmbedCols { start } => {
            vec![(0, g.slice_cols(*start, p[0].shape().cols()))]
        }
        Op::EmbedRows { start } => {
            vec![(0, g.slice_rows(*start, p[0].shape().rows()))]
        }
        Op::GatherRows(idx) => {
            vec![(0, g.scatter_add_rows(idx, p[0].shape().rows()))]
        }
        Op::ScatterAddRows(idx) => vec![(0, g.gather_rows(idx))],
        Op::Reshape => vec![(0, g.reshape(p[0].shape().clone()))],
    }
}

/// Concatenate matrices with equal row counts along columns.
pub fn concat_cols(parts: &[Node]) -> Node {
    assert!(!parts.is_empty(), "concat_cols: empty input");
    let m = parts[0].shape().rows();
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.shape().rows(), m, "concat_cols: row count mismatch");
            p.shape().cols()
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut values = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            let n = p.shape().cols();
            values.extend_from_slice(&p.values()[i * n..(i + 1) * n]);
        }
    }
    make(
        Shape::matrix(m, total),
        values,
        Op::ConcatCols(widths),
        parts.to_vec(),
    )
}

/// Stack matrices with equal column counts along rows.
pub fn concat_rows(parts: &[Node]) -> Node {
    assert!(!parts.is_empty(), "concat_rows: empty input");
    let n = parts[0].shape().cols();
    let heights: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.shape().cols(), n, "concat_rows: column count mismatch");
            p.shape().rows()
        })
        .collect();
    let total: usize = heights.iter().sum();
    let mut values = Vec::with_capacity(total * n);
    for p in parts {
        values.extend_from_slice(p.values());
    }
    make(
        Shape::matrix(total, n),
        values,
        Op::ConcatRows(heights),
        parts.to_vec(),
    )
}

/// Sum a non-empty list of same-shaped nodes.
pub fn sum_nodes(nodes: &[Node]) -> Node {
    assert!(!nodes.is_empty(), "sum_nodes: empty input");
    let mut acc = nodes[0].clone();
    for n in &nodes[1..] {
        acc = acc.add(n);
    }
    acc
}

/// Compare the analytic gradient of `f` against central finite differences
/// at step `h`, per coordinate. Returns the worst relative error.
pub fn finite_diff_check<F: Fn(&ParamSet) -> Node>(f: F, params: &ParamSet, h: f64) -> f64 {
    assert!(
        (1e-7..=1e-3).contains(&h),
        "finite_diff_check: step {} outside [1e-7, 1e-3]",
        h
    );
    let analytic = grad(&f(params), params, false);
    let base = params.flat_values();
    let mut worst = 0.0f64;
    let mut flat_analytic = Vec::with_capacity(base.len());
    for (name, _) in params {
        flat_analytic.extend_from_slice(analytic.at(name).values());
    }
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&params.with_flat_values(&plus)).value();
        let fm = f(&params.with_flat_values(&minus)).value();
        let numeric = (fp - fm) / (2.0 * h);
        let a = flat_analytic[i];
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        let err = (a - numeric).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}


impl Node {
    /// Extract element `i` of a vector node as a scalar node (test helper
    /// for Hessian probing; kept public for oracle code).
    pub fn slice_like_scalar(&self, i: usize) -> Node {
        let n = self.shape().numel();
        let picked = self
            .reshape(Shape::matrix(1, n))
            .slice_cols(i, 1);
        picked.reshape(Shape::scalar())
    }
}
