//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! nodes once in reverse order and accumulates gradients into every node that
//! lies on a path to the loss. Leaves created with [`Tape::param`] are the
//! trainable parameters; [`Tape::constant`] leaves never receive gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{degenerate, dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    FloorMin(Var, f64),
    SmoothL1(Var),
    Sum(Var),
    Mean(Var),
    RowCosine(Var, Var),
    RowMean(Var),
    RowVar(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Column(Var, usize),
    Reshape(Var),
    RoiMaxPool(Var, Vec<usize>),
    SoftmaxXent(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` is not
    /// on any path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

/// Integer-span RoI used by [`Tape::roi_max_pool`]: snippets `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// Snippet index range covered by bin `b` of a span: every snippet whose unit
/// interval overlaps the bin with positive measure.
pub fn bin_range(span: Span, bins: usize, b: usize) -> (usize, usize) {
    let n = (span.end - span.start) as f64;
    let lo = span.start as f64 + n * b as f64 / bins as f64;
    let hi = span.start as f64 + n * (b + 1) as f64 / bins as f64;
    let first = libm::floor(lo) as usize;
    let last = (libm::ceil(hi) as usize).max(first + 1);
    (first, last.min(span.end))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x[m×n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (m, n) = xv.as_matrix_dims();
        if bv.rank() != 1 || bv.len() != n {
            return Err(dim_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *d += *b;
            }
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_raw(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(dim_err(
                "mul_const",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(weights).map(|(a, w)| a * w).collect();
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst(x, weights.to_vec()), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), libm::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(degenerate("ln", format!("non-positive argument {v}")));
        }
        Ok(self.unary(x, Op::Ln(x), libm::log))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(degenerate("sqrt", format!("negative argument {v}")));
        }
        Ok(self.unary(x, Op::Sqrt(x), libm::sqrt))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn floor_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::FloorMin(x, floor), |v| if v < floor { floor } else { v })
    }

    /// Elementwise smooth-L1 with unit transition point.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Op::SmoothL1(x), |v| {
            let a = v.abs();
            if a < 1.0 {
                0.5 * v * v
            } else {
                a - 0.5
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::from_raw(vec![1], vec![s]), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::from_raw(vec![1], vec![s]), Op::Mean(x), ng)
    }

    /// Cosine similarity of corresponding rows; rank-1 inputs are one row.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, d) = av.as_matrix_dims();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let (u, v) = (av.row(i), bv.row(i));
            let nu = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
            let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if nu == 0.0 || nv == 0.0 {
                return Err(degenerate("cosine", format!("zero-norm row {i} (width {d})")));
            }
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            out.push((dot / (nu * nv)).clamp(-1.0, 1.0));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_raw(vec![m], out), Op::RowCosine(a, b), ng))
    }

    /// Population mean of every row.
    pub fn row_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, d) = xv.as_matrix_dims();
        let out = (0..m).map(|i| xv.row(i).iter().sum::<f64>() / d as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_raw(vec![m], out), Op::RowMean(x), ng)
    }

    /// Population variance of every row.
    pub fn row_var(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, d) = xv.as_matrix_dims();
        let out = (0..m)
            .map(|i| {
                let r = xv.row(i);
                let mu = r.iter().sum::<f64>() / d as f64;
                r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64
            })
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_raw(vec![m], out), Op::RowVar(x), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p) = av.as_matrix_dims();
        let (m2, q) = bv.as_matrix_dims();
        if m != m2 {
            return Err(dim_err("concat", format!("{:?} ⊕ {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let shape = if av.rank() == 1 && bv.rank() == 1 {
            vec![p + q]
        } else {
            vec![m, p + q]
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_raw(shape, data), Op::ConcatCols(a, b), ng))
    }

    /// Rows of a matrix selected (with repetition) by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.as_matrix_dims();
        if rows.is_empty() {
            return Err(dim_err("gather_rows", "empty selection".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(dim_err("gather_rows", format!("row {r} of {m}")));
            }
            data.extend_from_slice(xv.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_raw(vec![rows.len(), n], data),
            Op::GatherRows(x, rows.to_vec()),
            ng,
        ))
    }

    /// Flat element selection into a rank-1 result.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(dim_err("select", format!("indices into {:?}", xv.shape())));
        }
        let data = idx.iter().map(|&i| xv.data()[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_raw(vec![idx.len()], data), Op::Select(x, idx.to_vec()), ng))
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.as_matrix_dims();
        if j >= n {
            return Err(dim_err("column", format!("column {j} of {n}")));
        }
        let data = (0..m).map(|i| xv.data()[i * n + j]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_raw(vec![m], data), Op::Column(x, j), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Max-pools each span of the row sequence `x[L×W]` into `bins` bins and
    /// concatenates them, giving `[P × bins·W]`.
    pub fn roi_max_pool(&mut self, x: Var, spans: &[Span], bins: usize) -> Result<Var> {
        let xv = self.value(x);
        let (l, w) = xv.as_matrix_dims();
        if bins == 0 || spans.is_empty() {
            return Err(dim_err("roi_pool", "no bins or spans".into()));
        }
        let mut data = Vec::with_capacity(spans.len() * bins * w);
        let mut argmax = Vec::with_capacity(spans.len() * bins * w);
        for s in spans {
            if s.start >= s.end {
                return Err(degenerate("roi_pool", format!("empty span [{}, {})", s.start, s.end)));
            }
            if s.end > l {
                return Err(dim_err("roi_pool", format!("span end {} > {l}", s.end)));
            }
            for b in 0..bins {
                let (lo, hi) = bin_range(*s, bins, b);
                for c in 0..w {
                    let mut best = lo * w + c;
                    for r in lo + 1..hi {
                        if xv.data()[r * w + c] > xv.data()[best] {
                            best = r * w + c;
                        }
                    }
                    data.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_raw(vec![spans.len(), bins * w], data),
            Op::RoiMaxPool(x, argmax),
            ng,
        ))
    }

    /// Per-row softmax cross-entropy against integer targets, giving `[m]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, k) = lv.as_matrix_dims();
        if targets.len() != m || targets.iter().any(|&t| t >= k) {
            return Err(dim_err(
                "softmax_xent",
                format!("{} targets for {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut out = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lz = libm::log(z) + mx;
            out.push(lz - row[t]);
            probs.extend(row.iter().map(|v| libm::exp(v - lz)));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::from_raw(vec![m], out),
            Op::SoftmaxXent(logits, targets.to_vec(), probs),
            ng,
        ))
    }

    /// Cosine of two rank-1 vectors, as a scalar node.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).rank() != 1 || self.value(v).rank() != 1 {
            return Err(dim_err("cosine", "expects rank-1 inputs".into()));
        }
        self.row_cosine(u, v)
    }

    /// Population `(mean, standard deviation)` of a rank-1 vector.
    pub fn mean_std(&mut self, x: Var) -> Result<(Var, Var)> {
        let xv = self.value(x);
        if xv.rank() != 1 || xv.len() < 2 {
            return Err(degenerate(
                "mean_std",
                format!("needs a vector with at least 2 entries, got {:?}", xv.shape()),
            ));
        }
        let mu = self.row_mean(x);
        let var = self.row_var(x);
        let sigma = self.sqrt(var)?;
        Ok((mu, sigma))
    }

    /// Computes `∂loss/∂node` for every node on a path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_raw(self.shape(loss).to_vec(), vec![1.0]));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_raw(val(v).shape().to_vec(), data);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).as_matrix_dims();
                let n = val(*b).cols();
                if self.nodes[a.0].needs_grad {
                    acc(*a, like(*a, matmul_nt(gd, val(*b).data(), m, n, k)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, like(*b, matmul_tn(val(*a).data(), gd, m, k, n)));
                }
            }
            Op::AddBias(x, b) => {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += *v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, like(*b, gb));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, like(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Affine(x, s) => acc(*x, g.map(|v| v * s)),
            Op::MulConst(x, w) => {
                acc(*x, like(*x, gd.iter().zip(w).map(|(g, w)| g * w).collect()));
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                acc(*x, like(*x, d.collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, like(*x, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, like(*x, gd.iter().zip(y).map(|(g, y)| g * y).collect()));
            }
            Op::Ln(x) => {
                let xv = val(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, x)| g / x).collect()));
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| if *y > 0.0 { g * 0.5 / y } else { 0.0 });
                acc(*x, like(*x, d.collect()));
            }
            Op::FloorMin(x, floor) => {
                let xv = val(*x).data();
                let d = gd.iter().zip(xv).map(|(g, x)| if *x < *floor { 0.0 } else { *g });
                acc(*x, like(*x, d.collect()));
            }
            Op::SmoothL1(x) => {
                let xv = val(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, x)| if x.abs() < 1.0 { g * x } else { g * x.signum() });
                acc(*x, like(*x, d.collect()));
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                acc(*x, like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, like(*x, vec![gd[0] / n as f64; n]));
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, d) = av.as_matrix_dims();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..m {
                    let (u, v) = (av.row(i), bv.row(i));
                    let nu = libm::sqrt(u.iter().map(|x| x * x).sum::<f64>());
                    let nv = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                    let c = node.value.data()[i];
                    for j in 0..d {
                        ga[i * d + j] = gd[i] * (v[j] / (nu * nv) - c * u[j] / (nu * nu));
                        gb[i * d + j] = gd[i] * (u[j] / (nu * nv) - c * v[j] / (nv * nv));
                    }
                }
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::RowMean(x) => {
                let (m, d) = val(*x).as_matrix_dims();
                let mut out = vec![0.0; m * d];
                for i in 0..m {
                    out[i * d..(i + 1) * d].fill(gd[i] / d as f64);
                }
                acc(*x, like(*x, out));
            }
            Op::RowVar(x) => {
                let xv = val(*x);
                let (m, d) = xv.as_matrix_dims();
                let mut out = vec![0.0; m * d];
                for i in 0..m {
                    let r = xv.row(i);
                    let mu = r.iter().sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[i * d + j] = gd[i] * 2.0 * (r[j] - mu) / d as f64;
                    }
                }
                acc(*x, like(*x, out));
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = val(*a).as_matrix_dims();
                let q = val(*b).cols();
                let mut ga = Vec::with_capacity(m * p);
                let mut gb = Vec::with_capacity(m * q);
                for row in gd.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::GatherRows(x, rows) => {
                let n = val(*x).cols();
                let mut out = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        out[r * n + j] += gd[k * n + j];
                    }
                }
                acc(*x, like(*x, out));
            }
            Op::Select(x, idx) => {
                let mut out = vec![0.0; val(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    out[i] += gd[k];
                }
                acc(*x, like(*x, out));
            }
            Op::Column(x, j) => {
                let (m, n) = val(*x).as_matrix_dims();
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    out[i * n + j] = gd[i];
                }
                acc(*x, like(*x, out));
            }
            Op::Reshape(x) => acc(*x, like(*x, gd.to_vec())),
            Op::RoiMaxPool(x, argmax) => {
                let mut out = vec![0.0; val(*x).len()];
                for (k, &src) in argmax.iter().enumerate() {
                    out[src] += gd[k];
                }
                acc(*x, like(*x, out));
            }
            Op::SoftmaxXent(logits, targets, probs) => {
                let k = val(*logits).cols();
                let mut out = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    out[i * k + t] -= 1.0;
                    for v in &mut out[i * k..(i + 1) * k] {
                        *v *= gd[i];
                    }
                }
                acc(*logits, like(*logits, out));
            }
        }
    }
}
