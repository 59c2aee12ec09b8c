//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a define-by-run graph: every primitive appends a node with
//! the computed value, and [`Tape::backward`] walks the nodes in reverse,
//! pushing gradients to the inputs. Tapes are built per training step and
//! dropped afterwards; a tape is single-threaded, though individual matrix
//! products may parallelize internally over rows.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SmileError};
use crate::special::{self, BetaParams};
use crate::tensor::{CsrMatrix, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    SpMatmul(Rc<CsrMatrix>, usize),
    BroadcastAddRow(usize, usize),
    Sigmoid(usize),
    Softplus(usize),
    Log(usize),
    Exp(usize),
    Relu(usize),
    Square(usize),
    Recip(usize),
    Clamp(usize, f64, f64),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ConcatCols(usize, usize),
    SliceCols { src: usize, start: usize },
    GatherRows { src: usize, idx: Rc<Vec<usize>> },
    Transpose(usize),
    LogGamma(usize),
    Digamma(usize),
    BetaSample { alpha: usize, beta: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::SpMatmul(..) => "spmm",
            Op::BroadcastAddRow(..) => "broadcast_add_row",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Recip(_) => "recip",
            Op::Clamp(..) => "clamp",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::LogGamma(_) => "log_gamma",
            Op::Digamma(_) => "digamma",
            Op::BetaSample { .. } => "beta_sample",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, r: TensorRef) -> Option<&Tensor> {
        self.grads.get(r.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, r: TensorRef) -> Option<Tensor> {
        self.grads.get_mut(r.0).and_then(|g| g.take())
    }
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, r: TensorRef) -> &Tensor {
        &self.nodes[r.0].value
    }

    /// First non-finite value on the tape, reported as "op#index (row, col)".
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some((r, c, v)) = node.value.first_non_finite() {
                return Some(format!("{}#{i} at ({r}, {c}) = {v}", node.op.name()));
            }
        }
        None
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn check_same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        let (la, lb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if la != lb {
            return Err(SmileError::ShapeMismatch {
                op,
                left: la,
                right: lb,
            });
        }
        Ok(())
    }

    /// Insert a tensor as a graph input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorRef {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> TensorRef {
        self.leaf(value, false)
    }

    /// Identity in value, barrier in gradient.
    pub fn stop_gradient(&mut self, x: TensorRef) -> TensorRef {
        let value = self.val(x.0).clone();
        self.push(Op::StopGrad, value, false)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("add", a, b)?;
        let mut value = self.val(a.0).clone();
        value.add_assign(self.val(b.0));
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Add(a.0, b.0), value, rg))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("sub", a, b)?;
        let (rows, cols) = self.val(a.0).shape();
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Sub(a.0, b.0), Tensor::new(rows, cols, data)?, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape("mul", a, b)?;
        let (rows, cols) = self.val(a.0).shape();
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Mul(a.0, b.0), Tensor::new(rows, cols, data)?, rg))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let value = self.val(a.0).matmul(self.val(b.0))?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::Matmul(a.0, b.0), value, rg))
    }

    /// Sparse-constant times dense: `sparse @ x`.
    pub fn spmm(&mut self, sparse: Rc<CsrMatrix>, x: TensorRef) -> Result<TensorRef> {
        let value = sparse.matmul_dense(self.val(x.0))?;
        let rg = self.requires(x.0);
        Ok(self.push(Op::SpMatmul(sparse, x.0), value, rg))
    }

    /// Add a 1xn row vector to every row of an mxn matrix.
    pub fn broadcast_add_row(&mut self, a: TensorRef, row: TensorRef) -> Result<TensorRef> {
        let (m, n) = self.val(a.0).shape();
        let rshape = self.val(row.0).shape();
        if rshape != (1, n) {
            return Err(SmileError::ShapeMismatch {
                op: "broadcast_add_row",
                left: (m, n),
                right: rshape,
            });
        }
        let mut value = self.val(a.0).clone();
        let r = self.val(row.0).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                value.data_mut()[i * n + j] += r[j];
            }
        }
        let rg = self.requires(a.0) || self.requires(row.0);
        Ok(self.push(Op::BroadcastAddRow(a.0, row.0), value, rg))
    }

    fn unary(&mut self, x: TensorRef, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> TensorRef {
        let value = self.val(x.0).map(f);
        let rg = self.requires(x.0);
        self.push(op(x.0), value, rg)
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Sigmoid, sigmoid_scalar)
    }

    pub fn softplus(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Softplus, softplus_scalar)
    }

    pub fn log(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Log, f64::ln)
    }

    pub fn exp(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Exp, f64::exp)
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    pub fn square(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Square, |v| v * v)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: TensorRef) -> TensorRef {
        self.unary(x, Op::Recip, |v| 1.0 / v)
    }

    /// Elementwise clamp; gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, x: TensorRef, lo: f64, hi: f64) -> TensorRef {
        let value = self.val(x.0).map(|v| v.clamp(lo, hi));
        let rg = self.requires(x.0);
        self.push(Op::Clamp(x.0, lo, hi), value, rg)
    }

    pub fn clamp_min(&mut self, x: TensorRef, lo: f64) -> TensorRef {
        self.clamp(x, lo, f64::INFINITY)
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let value = self.val(x.0).map(|v| c * v);
        let rg = self.requires(x.0);
        self.push(Op::Scale(x.0, c), value, rg)
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let value = self.val(x.0).map(|v| v + c);
        let rg = self.requires(x.0);
        self.push(Op::AddScalar(x.0), value, rg)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let total: f64 = self.val(x.0).data().iter().sum();
        let rg = self.requires(x.0);
        self.push(Op::Sum(x.0), Tensor::scalar(total), rg)
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, x: TensorRef) -> TensorRef {
        let len = self.val(x.0).len() as f64;
        let total: f64 = self.val(x.0).data().iter().sum();
        let rg = self.requires(x.0);
        self.push(Op::Mean(x.0), Tensor::scalar(total / len), rg)
    }

    /// Row sums, mxn -> mx1.
    pub fn row_sum(&mut self, x: TensorRef) -> TensorRef {
        let value = self.val(x.0).row_sum();
        let rg = self.requires(x.0);
        self.push(Op::RowSum(x.0), value, rg)
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (ma, na) = self.val(a.0).shape();
        let (mb, nb) = self.val(b.0).shape();
        if ma != mb {
            return Err(SmileError::ShapeMismatch {
                op: "concat_cols",
                left: (ma, na),
                right: (mb, nb),
            });
        }
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(self.val(a.0).row(i));
            data.extend_from_slice(self.val(b.0).row(i));
        }
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(Op::ConcatCols(a.0, b.0), Tensor::new(ma, na + nb, data)?, rg))
    }

    /// Columns `[start, start+len)` of x.
    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let (m, n) = self.val(x.0).shape();
        if start + len > n {
            return Err(SmileError::ShapeMismatch {
                op: "slice_cols",
                left: (m, n),
                right: (start, len),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.val(x.0).row(i)[start..start + len]);
        }
        let rg = self.requires(x.0);
        Ok(self.push(Op::SliceCols { src: x.0, start }, Tensor::new(m, len, data)?, rg))
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: TensorRef, idx: Rc<Vec<usize>>) -> Result<TensorRef> {
        let (m, n) = self.val(x.0).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(SmileError::ShapeMismatch {
                op: "gather_rows",
                left: (m, n),
                right: (bad, 0),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(self.val(x.0).row(i));
        }
        let value = Tensor::new(idx.len(), n, data)?;
        let rg = self.requires(x.0);
        Ok(self.push(Op::GatherRows { src: x.0, idx }, value, rg))
    }

    pub fn transpose(&mut self, x: TensorRef) -> TensorRef {
        let value = self.val(x.0).transpose();
        let rg = self.requires(x.0);
        self.push(Op::Transpose(x.0), value, rg)
    }

    /// Elementwise ln Γ(x); requires strictly positive entries.
    pub fn log_gamma(&mut self, x: TensorRef) -> Result<TensorRef> {
        let mut data = Vec::with_capacity(self.val(x.0).len());
        for &v in self.val(x.0).data() {
            data.push(special::log_gamma(v)?);
        }
        let (m, n) = self.val(x.0).shape();
        let rg = self.requires(x.0);
        Ok(self.push(Op::LogGamma(x.0), Tensor::new(m, n, data)?, rg))
    }

    /// Elementwise ψ(x); requires strictly positive entries.
    pub fn digamma(&mut self, x: TensorRef) -> Result<TensorRef> {
        let mut data = Vec::with_capacity(self.val(x.0).len());
        for &v in self.val(x.0).data() {
            data.push(special::digamma(v)?);
        }
        let (m, n) = self.val(x.0).shape();
        let rg = self.requires(x.0);
        Ok(self.push(Op::Digamma(x.0), Tensor::new(m, n, data)?, rg))
    }

    /// Elementwise Beta(α, β) draw with implicit-reparameterization
    /// gradients: ∂d/∂α = −(∂I_d/∂α)/pdf(d) and likewise for β.
    ///
    /// Sampling inverts the regularized incomplete beta by bisection, so a
    /// fixed seed gives bit-identical draws. Samples are clamped to
    /// [1e-6, 1−1e-6] before the gradient factors are evaluated.
    pub fn beta_sample(&mut self, alpha: TensorRef, beta: TensorRef, seed: u64) -> Result<TensorRef> {
        self.check_same_shape("beta_sample", alpha, beta)?;
        let (m, n) = self.val(alpha.0).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(m * n);
        for k in 0..m * n {
            let a = self.val(alpha.0).data()[k];
            let b = self.val(beta.0).data()[k];
            let p = BetaParams::new(a, b)
                .map_err(|_| SmileError::domain("beta_sample", format!("nonpositive shape at flat index {k}: alpha={a}, beta={b}")))?;
            let u: f64 = rng.gen_range(0.0..1.0);
            let d = special::beta_inv_cdf(u, p)?;
            data.push(d.clamp(1e-6, 1.0 - 1e-6));
        }
        let rg = self.requires(alpha.0) || self.requires(beta.0);
        Ok(self.push(
            Op::BetaSample {
                alpha: alpha.0,
                beta: beta.0,
            },
            Tensor::new(m, n, data)?,
            rg,
        ))
    }

    /// Reverse pass from a scalar loss node. Every node is visited exactly
    /// once; gradients accumulate onto all reachable `requires_grad` nodes.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients> {
        if !self.val(loss.0).is_scalar() {
            return Err(SmileError::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.val(loss.0).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                // Keep leaf gradients in place for the caller.
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], parent: usize, contribution: Tensor) {
        if !self.requires(parent) {
            return;
        }
        match &mut grads[parent] {
            Some(acc) => acc.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn apply_backward(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let mut t = g.clone();
                    for (x, y) in t.data_mut().iter_mut().zip(self.val(*b).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *a, t);
                }
                if self.requires(*b) {
                    let mut t = g.clone();
                    for (x, y) in t.data_mut().iter_mut().zip(self.val(*a).data()) {
                        *x *= y;
                    }
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Matmul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.val(*b))?);
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, self.val(*a).matmul_tn(g)?);
                }
            }
            Op::SpMatmul(sparse, b) => {
                if self.requires(*b) {
                    self.accumulate(grads, *b, sparse.matmul_dense_transposed(g)?);
                }
            }
            Op::BroadcastAddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires(*r) {
                    self.accumulate(grads, *r, g.col_sum());
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let t = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(grads, *a, t);
            }
            Op::Softplus(a) => {
                let t = zip_map(g, self.val(*a), |gv, xv| gv * sigmoid_scalar(xv));
                self.accumulate(grads, *a, t);
            }
            Op::Log(a) => {
                let t = zip_map(g, self.val(*a), |gv, xv| gv / xv);
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = zip_map(g, &self.nodes[idx].value, |gv, yv| gv * yv);
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let t = zip_map(g, self.val(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let t = zip_map(g, self.val(*a), |gv, xv| gv * 2.0 * xv);
                self.accumulate(grads, *a, t);
            }
            Op::Recip(a) => {
                let t = zip_map(g, &self.nodes[idx].value, |gv, yv| -gv * yv * yv);
                self.accumulate(grads, *a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = zip_map(g, self.val(*a), |gv, xv| {
                    if xv > lo && xv < hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, t);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| c * v));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Sum(a) => {
                let (m, n) = self.val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(m, n, g.item()));
            }
            Op::Mean(a) => {
                let (m, n) = self.val(*a).shape();
                let gv = g.item() / (m * n) as f64;
                self.accumulate(grads, *a, Tensor::filled(m, n, gv));
            }
            Op::RowSum(a) => {
                let (m, n) = self.val(*a).shape();
                let mut t = Tensor::zeros(m, n);
                for i in 0..m {
                    let gv = g.get(i, 0);
                    for j in 0..n {
                        t.set(i, j, gv);
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.val(*a).shape();
                let nb = self.val(*b).cols();
                if self.requires(*a) {
                    let mut t = Tensor::zeros(m, na);
                    for i in 0..m {
                        for j in 0..na {
                            t.set(i, j, g.get(i, j));
                        }
                    }
                    self.accumulate(grads, *a, t);
                }
                if self.requires(*b) {
                    let mut t = Tensor::zeros(m, nb);
                    for i in 0..m {
                        for j in 0..nb {
                            t.set(i, j, g.get(i, na + j));
                        }
                    }
                    self.accumulate(grads, *b, t);
                }
            }
            Op::SliceCols { src, start } => {
                let (m, n) = self.val(*src).shape();
                let len = g.cols();
                let mut t = Tensor::zeros(m, n);
                for i in 0..m {
                    for j in 0..len {
                        t.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *src, t);
            }
            Op::GatherRows { src, idx: rows } => {
                let (m, n) = self.val(*src).shape();
                let mut t = Tensor::zeros(m, n);
                for (out_i, &src_i) in rows.iter().enumerate() {
                    for j in 0..n {
                        let cur = t.get(src_i, j);
                        t.set(src_i, j, cur + g.get(out_i, j));
                    }
                }
                self.accumulate(grads, *src, t);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose());
            }
            Op::LogGamma(a) => {
                let mut t = g.clone();
                for (gv, &xv) in t.data_mut().iter_mut().zip(self.val(*a).data()) {
                    *gv *= special::digamma(xv)?;
                }
                self.accumulate(grads, *a, t);
            }
            Op::Digamma(a) => {
                let mut t = g.clone();
                for (gv, &xv) in t.data_mut().iter_mut().zip(self.val(*a).data()) {
                    *gv *= special::trigamma(xv)?;
                }
                self.accumulate(grads, *a, t);
            }
            Op::BetaSample { alpha, beta } => {
                let need_a = self.requires(*alpha);
                let need_b = self.requires(*beta);
                let d = &self.nodes[idx].value;
                let (m, n) = d.shape();
                let mut ga = Tensor::zeros(m, n);
                let mut gb = Tensor::zeros(m, n);
                for k in 0..m * n {
                    let p = BetaParams {
                        alpha: self.val(*alpha).data()[k],
                        beta: self.val(*beta).data()[k],
                    };
                    let dv = d.data()[k];
                    let (dia, dib) = special::beta_cdf_param_grads(dv, p)?;
                    let pdf = special::beta_log_pdf(dv, p)?.exp();
                    let gv = g.data()[k];
                    if need_a {
                        ga.data_mut()[k] = gv * (-dia / pdf);
                    }
                    if need_b {
                        gb.data_mut()[k] = gv * (-dib / pdf);
                    }
                }
                if need_a {
                    self.accumulate(grads, *alpha, ga);
                }
                if need_b {
                    self.accumulate(grads, *beta, gb);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = g.clone();
    for (gv, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        *gv = f(*gv, xv);
    }
    out
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forward_fixed_points() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(zero);
        assert_abs_diff_eq!(tape.value(s).item(), 0.5);
        let sp = tape.softplus(zero);
        assert_abs_diff_eq!(tape.value(sp).item(), 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn matmul_identity_forward() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::eye(3));
        let m = Tensor::new(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let mr = tape.constant(m.clone());
        let out = tape.matmul(id, mr).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(x ⊙ x), x = (1, 2, 3) → grad = (2, 4, 6)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // loss = sum(stop_gradient(w) ⊙ x): zero gradient to w, w-valued to x.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(1, 2, vec![3.0, 4.0]).unwrap(), true);
        let x = tape.leaf(Tensor::new(1, 2, vec![1.0, 1.0]).unwrap(), true);
        let sw = tape.stop_gradient(w);
        let prod = tape.mul(sw, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradient_linearity_is_exact() {
        let build = |tape: &mut Tape, scale_a: f64, scale_b: f64| {
            let x = tape.leaf(Tensor::new(1, 3, vec![0.4, -0.7, 1.3]).unwrap(), true);
            let sq = tape.mul(x, x).unwrap();
            let a = tape.sum(sq);
            let sg = tape.sigmoid(x);
            let b = tape.sum(sg);
            let sa = tape.scale(a, scale_a);
            let sb = tape.scale(b, scale_b);
            let loss = tape.add(sa, sb).unwrap();
            (x, loss)
        };
        let mut t1 = Tape::new();
        let (x1, l1) = build(&mut t1, 1.0, 0.0);
        let g1 = t1.backward(l1).unwrap();
        let mut t2 = Tape::new();
        let (x2, l2) = build(&mut t2, 0.0, 1.0);
        let g2 = t2.backward(l2).unwrap();
        let mut t3 = Tape::new();
        let (x3, l3) = build(&mut t3, 1.0, 1.0);
        let g3 = t3.backward(l3).unwrap();
        for j in 0..3 {
            let lin = g1.get(x1).unwrap().data()[j] + g2.get(x2).unwrap().data()[j];
            let joint = g3.get(x3).unwrap().data()[j];
            assert!((lin - joint).abs() <= 1e-12);
        }
    }

    #[test]
    fn composed_chain_matches_finite_differences() {
        // loss = sigmoid(w · x) as a scalar through matmul.
        let w0 = vec![0.3, -0.2, 0.8, 0.1];
        let x0 = Tensor::new(4, 1, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let eval = |wdata: &[f64]| {
            let mut t = Tape::new();
            let w = t.leaf(Tensor::new(1, 4, wdata.to_vec()).unwrap(), true);
            let x = t.constant(x0.clone());
            let wx = t.matmul(w, x).unwrap();
            let s = t.sigmoid(wx);
            let loss = t.sum(s);
            (t, w, loss)
        };

        let (tape, w, loss) = eval(&w0);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(w).unwrap().clone();

        let h = 1e-5;
        for j in 0..4 {
            let mut up = w0.clone();
            up[j] += h;
            let mut dn = w0.clone();
            dn[j] -= h;
            let (t_up, _, l_up) = eval(&up);
            let (t_dn, _, l_dn) = eval(&dn);
            let fd = (t_up.value(l_up).item() - t_dn.value(l_dn).item()) / (2.0 * h);
            let rel = (analytic.data()[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-5, "j={j}: {} vs {fd}", analytic.data()[j]);
        }
    }

    #[test]
    fn beta_sample_concentrates_symmetric() {
        let mut tape = Tape::new();
        let n = 10_000;
        let alpha = tape.constant(Tensor::filled(1, n, 1000.0));
        let beta = tape.constant(Tensor::filled(1, n, 1000.0));
        let d = tape.beta_sample(alpha, beta, 99).unwrap();
        let mean: f64 = tape.value(d).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn beta_sample_deterministic_under_seed() {
        let run = || {
            let mut tape = Tape::new();
            let alpha = tape.leaf(Tensor::filled(2, 3, 2.0), true);
            let beta = tape.leaf(Tensor::filled(2, 3, 3.0), true);
            let d = tape.beta_sample(alpha, beta, 1234).unwrap();
            let s = tape.sum(d);
            let grads = tape.backward(s).unwrap();
            (
                tape.value(d).data().to_vec(),
                grads.get(alpha).unwrap().data().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn beta_sample_mean_gradient_matches_analytic() {
        // d/dα E[d] at (α=2, β=3) is β/(α+β)² = 0.12.
        let n = 100_000;
        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::filled(1, n, 2.0), true);
        let beta = tape.leaf(Tensor::filled(1, n, 3.0), true);
        let d = tape.beta_sample(alpha, beta, 7).unwrap();
        let loss = tape.mean(d);
        let grads = tape.backward(loss).unwrap();
        // The loss averages n draws, so each per-element gradient estimates
        // (1/n) d/dα E[d]; their sum estimates the full derivative.
        let per_sample: Vec<f64> = grads
            .get(alpha)
            .unwrap()
            .data()
            .iter()
            .map(|&g| g * n as f64)
            .collect();
        let mean: f64 = per_sample.iter().sum::<f64>() / n as f64;
        let var: f64 =
            per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 0.12).abs() <= 3.0 * se,
            "grad {mean} vs 0.12 (se {se})"
        );
    }

    #[test]
    fn beta_sample_second_moment_gradient_matches_fd_of_analytic() {
        // E[d²] = α(α+1)/((α+β)(α+β+1)); compare ∂/∂β at (2, 2) against a
        // finite difference of that closed form.
        let second_moment = |a: f64, b: f64| a * (a + 1.0) / ((a + b) * (a + b + 1.0));
        let h = 1e-5;
        let analytic = (second_moment(2.0, 2.0 + h) - second_moment(2.0, 2.0 - h)) / (2.0 * h);

        let n = 100_000;
        let mut tape = Tape::new();
        let alpha = tape.leaf(Tensor::filled(1, n, 2.0), true);
        let beta = tape.leaf(Tensor::filled(1, n, 2.0), true);
        let d = tape.beta_sample(alpha, beta, 21).unwrap();
        let d2 = tape.square(d);
        let loss = tape.mean(d2);
        let grads = tape.backward(loss).unwrap();
        let per_sample: Vec<f64> = grads
            .get(beta)
            .unwrap()
            .data()
            .iter()
            .map(|&g| g * n as f64)
            .collect();
        let mean: f64 = per_sample.iter().sum::<f64>() / n as f64;
        let var: f64 =
            per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - analytic).abs() <= 3.0 * se,
            "grad {mean} vs {analytic} (se {se})"
        );
    }

    #[test]
    fn beta_sample_rejects_nonpositive() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::filled(1, 2, 0.0));
        let beta = tape.constant(Tensor::filled(1, 2, 1.0));
        assert!(tape.beta_sample(alpha, beta, 1).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 3));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)") && err.contains("(3, 3)"), "{err}");
    }
}
