//! Define-by-run reverse-mode differentiation over dense 2-D tensors.
//!
//! Every primitive call appends a node holding its forward value, so the
//! node list is topologically ordered by construction. `backward` walks the
//! list in reverse and accumulates adjoints for nodes that depend on a
//! trainable leaf. Graphs are cheap and meant to be rebuilt every step.

use super::tensor::{validate_shape, Real, Tensor};
use super::DiffError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Additive sentinel used by masked attention in place of negative infinity.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, T),
    AddScalar(Var),
    Softmax(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    LayerNorm(Var, Vec<T>),
    L2Normalize(Var, Vec<T>),
    Transpose(Var),
    Reshape(Var),
    MaskedAdd(Var),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Clamp(Var, T, T),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::MaskedAdd(..) => "masked_add",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Clamp(..) => "clamp",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    leaves: Vec<(usize, Vec<usize>, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.leaves
            .iter()
            .find(|(id, _, _)| *id == v.0)
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.leaves.iter().find(|(id, _, _)| *id == v.0).map(|(_, s, g)| {
            Tensor::new(s.clone(), g.iter().map(|x| x.as_f64() as f32).collect())
                .expect("gradient shape matches leaf")
        })
    }
}

/// Interpret a shape as (rows, cols).
fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols, cols)
        }
    }
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast, DiffError> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    if br * bc == 1 {
        Ok(Bcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if bc == 1 && br == ar {
        Ok(Bcast::Col)
    } else if ar * ac == br * bc && ar == br {
        Ok(Bcast::Same)
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

/// c (m×n) = a (m×k) · b (k×n)
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// c (m×n) += a (m×k) · bᵀ where b is (n×k)
fn mm_nt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// c (k×n) += aᵀ · b where a is (m×k), b is (m×n)
fn mm_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

#[cfg(test)]
thread_local! {
    /// Test hook: doubles the sigmoid adjoint so the gradient checker can be
    /// shown to detect a broken rule.
    pub(crate) static CORRUPT_SIGMOID: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<T>,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var, DiffError> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = self.nodes.len();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copy a node's value out as an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(
            n.shape.clone(),
            n.value.iter().map(|x| x.as_f64() as f32).collect(),
        )
        .expect("node shape consistent")
    }

    fn input_raw(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        trainable: bool,
    ) -> Result<Var, DiffError> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(DiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        let op = if trainable { Op::Leaf } else { Op::Constant };
        self.push(op, shape, data, trainable)
    }

    /// Trainable leaf initialised from an `f32` tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&x| T::lit(x as f64)).collect();
        self.input_raw(t.shape().to_vec(), data, true)
            .expect("tensor already validated")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let data = t.data().iter().map(|&x| T::lit(x as f64)).collect();
        self.input_raw(t.shape().to_vec(), data, false)
            .expect("tensor already validated")
    }

    pub fn leaf_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, DiffError> {
        self.input_raw(shape, data, true)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, DiffError> {
        self.input_raw(shape, data, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = dims2(sa);
        let (k2, n) = dims2(sb);
        if k != k2 || sa.len() > 2 || sb.len() > 2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let value = mm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), vec![m, n], value, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Bcast), DiffError> {
        let kind = bcast_kind(name, self.shape(a), self.shape(b))?;
        let cols = dims2(self.shape(a)).1;
        let (av, bv) = (self.value(a), self.value(b));
        let value = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[bidx(kind, i, cols)]))
            .collect();
        Ok((value, kind))
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, kind) = self.binary(a, b, "add", |x, y| x + y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        self.push(Op::Add(a, b, kind), shape, value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, kind) = self.binary(a, b, "subtract", |x, y| x - y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        self.push(Op::Sub(a, b, kind), shape, value, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, kind) = self.binary(a, b, "multiply", |x, y| x * y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a) || self.rg(b));
        self.push(Op::Mul(a, b, kind), shape, value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let c = T::lit(c);
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Scale(a, c), shape, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let c = T::lit(c);
        let value = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::AddScalar(a), shape, value, rg)
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        let av = self.value(a);
        let mut value = vec![T::zero(); av.len()];
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let out = &mut value[r * cols..(r + 1) * cols];
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(x) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Softmax(a), shape, value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Sigmoid(a), shape, value, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).iter().map(|&x| x.ln()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Log(a), shape, value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).iter().map(|&x| x.exp()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Exp(a), shape, value, rg)
    }

    /// Per-row standardisation (zero mean, unit variance), no affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        let av = self.value(a);
        let n = T::lit(cols as f64);
        let eps = T::lit(LN_EPS);
        let mut value = vec![T::zero(); av.len()];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (o, &v) in value[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::LayerNorm(a, rstds), shape, value, rg)
    }

    /// Divide each row by its ℓ2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        let av = self.value(a);
        let mut value = vec![T::zero(); av.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av[r * cols..(r + 1) * cols];
            let norm = x
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::lit(NORM_EPS));
            for (o, &v) in value[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::L2Normalize(a, norms), shape, value, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let shape = self.shape(a);
        if shape.len() > 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                left: shape.to_vec(),
                right: vec![],
            });
        }
        let (rows, cols) = dims2(shape);
        let av = self.value(a);
        let mut value = vec![T::zero(); av.len()];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = av[r * cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a), vec![cols, rows], value, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Reshape(a), shape.to_vec(), value, rg)
    }

    /// `a + mask` where the mask is treated as a constant (no gradient).
    pub fn masked_add(&mut self, a: Var, mask: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(mask) {
            return Err(DiffError::ShapeMismatch {
                op: "masked_add",
                left: self.shape(a).to_vec(),
                right: self.shape(mask).to_vec(),
            });
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(mask))
            .map(|(&x, &m)| x + m)
            .collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::MaskedAdd(a), shape, value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        let value = av.iter().copied().sum::<T>() / T::lit(av.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![1], vec![value], rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let value = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], vec![value], rg)
    }

    /// Column means: (m×n) → (1×n).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        let av = self.value(a);
        let mut value = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in value.iter_mut().zip(&av[r * cols..(r + 1) * cols]) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::lit(rows as f64);
        value.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), vec![1, cols], value, rg)
    }

    /// Stack row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::InvalidShape(vec![]))?;
        let cols = dims2(self.shape(first)).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if c != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![rows, cols], value, rg)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        if start >= end || end > rows {
            return Err(DiffError::ShapeMismatch {
                op: "slice_rows",
                left: self.shape(a).to_vec(),
                right: vec![start, end],
            });
        }
        let value = self.value(a)[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, start), vec![end - start, cols], value, rg)
    }

    /// Select rows by index (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (rows, cols) = dims2(self.shape(a));
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(DiffError::ShapeMismatch {
                op: "gather_rows",
                left: self.shape(a).to_vec(),
                right: idx.to_vec(),
            });
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(
            Op::GatherRows(a, idx.to_vec()),
            vec![idx.len(), cols],
            value,
            rg,
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(Op::Clamp(a, lo, hi), shape, value, rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, DiffError> {
        let out = self.node(output);
        if out.value.len() != 1 {
            return Err(DiffError::NotScalar(out.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![T::one()]);

        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(id, n)| {
                let g = adj
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); n.value.len()]);
                (id, n.shape.clone(), g)
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                if self.rg(*a) {
                    let ga = slot(adj, *a, m * k);
                    mm_nt_acc(ga, g, self.value(*b), m, n, k);
                }
                if self.rg(*b) {
                    let gb = slot(adj, *b, k * n);
                    mm_tn_acc(gb, self.value(*a), g, m, k, n);
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.rg(*a) {
                    accumulate(slot(adj, *a, g.len()), g.iter().copied());
                }
                if self.rg(*b) {
                    let cols = dims2(&node.shape).1;
                    let blen = self.value(*b).len();
                    let gb = slot(adj, *b, blen);
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bidx(*kind, i, cols);
                        gb[j] = gb[j] + sign * gi;
                    }
                }
            }
            Op::Mul(a, b, kind) => {
                let cols = dims2(&node.shape).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = slot(adj, *a, g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] = ga[i] + gi * bv[bidx(*kind, i, cols)];
                    }
                }
                if self.rg(*b) {
                    let gb = slot(adj, *b, bv.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bidx(*kind, i, cols);
                        gb[j] = gb[j] + gi * av[i];
                    }
                }
            }
            Op::Scale(a, c) => accumulate(slot(adj, *a, g.len()), g.iter().map(|&x| x * *c)),
            Op::AddScalar(a) | Op::Reshape(a) | Op::MaskedAdd(a) => {
                accumulate(slot(adj, *a, g.len()), g.iter().copied())
            }
            Op::Softmax(a) => {
                let cols = dims2(&node.shape).1;
                let ga = slot(adj, *a, g.len());
                for r in 0..g.len() / cols {
                    let range = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in ga[range].iter_mut().zip(yr).zip(gr) {
                        *o = *o + p * (q - dot);
                    }
                }
            }
            Op::Sigmoid(a) => {
                #[allow(unused_mut)]
                let mut factor = T::one();
                #[cfg(test)]
                if CORRUPT_SIGMOID.with(|c| c.get()) {
                    factor = T::lit(2.0);
                }
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &s)| factor * gi * s * (T::one() - s)),
                )
            }
            Op::Log(a) => {
                let av = self.value(*a);
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter().zip(av).map(|(&gi, &x)| gi / x),
                )
            }
            Op::Exp(a) => accumulate(
                slot(adj, *a, g.len()),
                g.iter().zip(y).map(|(&gi, &e)| gi * e),
            ),
            Op::LayerNorm(a, rstds) => {
                let cols = dims2(&node.shape).1;
                let n = T::lit(cols as f64);
                let ga = slot(adj, *a, g.len());
                for (r, &rstd) in rstds.iter().enumerate() {
                    let range = r * cols..(r + 1) * cols;
                    let (xh, gr) = (&y[range.clone()], &g[range.clone()]);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gx = xh.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for ((o, &p), &q) in ga[range].iter_mut().zip(xh).zip(gr) {
                        *o = *o + rstd * (q - mean_g - p * mean_gx);
                    }
                }
            }
            Op::L2Normalize(a, norms) => {
                let cols = dims2(&node.shape).1;
                let ga = slot(adj, *a, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let range = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y[range.clone()], &g[range.clone()]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in ga[range].iter_mut().zip(yr).zip(gr) {
                        *o = *o + (q - p * dot) / norm;
                    }
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = dims2(self.shape(*a));
                let ga = slot(adj, *a, g.len());
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] = ga[r * cols + c] + g[c * rows + r];
                    }
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let v = g[0] / T::lit(len as f64);
                accumulate(slot(adj, *a, len), std::iter::repeat(v).take(len))
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(slot(adj, *a, len), std::iter::repeat(g[0]).take(len))
            }
            Op::MeanRows(a) => {
                let (rows, cols) = dims2(self.shape(*a));
                let inv = T::one() / T::lit(rows as f64);
                let ga = slot(adj, *a, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] = ga[r * cols + c] + g[c] * inv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        accumulate(slot(adj, p, len), g[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = dims2(&node.shape).1;
                let len = self.value(*a).len();
                let ga = slot(adj, *a, len);
                let base = start * cols;
                for (o, &gi) in ga[base..base + g.len()].iter_mut().zip(g) {
                    *o = *o + gi;
                }
            }
            Op::GatherRows(a, idx) => {
                let cols = dims2(&node.shape).1;
                let len = self.value(*a).len();
                let ga = slot(adj, *a, len);
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[i * cols + c] = ga[i * cols + c] + g[k * cols + c];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                accumulate(
                    slot(adj, *a, g.len()),
                    g.iter().zip(av).map(|(&gi, &x)| {
                        if x >= *lo && x <= *hi {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                )
            }
        }
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
