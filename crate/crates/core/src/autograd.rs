//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in insertion order. Values are
//! computed eagerly; [`Tape::backward`] walks the nodes in exact reverse
//! order and returns a [`Gradients`] table keyed by [`Var`]. Parameters live
//! outside the tape: each training step binds them as fresh leaves, so one
//! tape corresponds to exactly one forward/backward pass.
//!
//! Every reduction sums in storage order, left to right, so forward values
//! and gradients are bitwise reproducible for fixed inputs.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Operand, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Tanh,
    Exp,
    Log,
    Softplus,
    Sin,
    Cos,
    Square,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ExpandCols(Var),
    SliceCols(Var, usize),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    BatchNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled to `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Softplus => "softplus",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Square => "square",
            Unary::Recip => "recip",
        }
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.shape() == [1, 1]
}

fn fmt_shape(s: [usize; 2]) -> String {
    format!("[{}x{}]", s[0], s[1])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Borrow the forward value of `v`. Do not hold across further ops.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad(v)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.rows(), x.cols(), data)
        } else if is_scalar(y) {
            let q = y.item();
            Ok(x.map(|p| f(p, q)))
        } else if is_scalar(x) {
            let p = x.item();
            Ok(y.map(|q| f(p, q)))
        } else {
            Err(Error::shape(
                name,
                format!("{} vs {}", fmt_shape(x.shape()), fmt_shape(y.shape())),
            ))
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    fn row_binary(&self, name: &'static str, x: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                name,
                format!("{} with row {}", fmt_shape(xv.shape()), fmt_shape(rv.shape())),
            ));
        }
        let cols = xv.cols();
        let r = rv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, r[i % cols]))
            .collect();
        Tensor::new(xv.rows(), cols, data)
    }

    /// Adds a `1×D` row to every row of a `B×D` tensor.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_binary("add_row", x, row, |p, q| p + q)?;
        Ok(self.push(out, Op::AddRow(x, row), self.rg(x) || self.rg(row)))
    }

    /// Multiplies every row of a `B×D` tensor by a `1×D` row.
    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_binary("mul_row", x, row, |p, q| p * q)?;
        Ok(self.push(out, Op::MulRow(x, row), self.rg(x) || self.rg(row)))
    }

    /// Repeats a `B×1` column `width` times.
    pub fn expand_cols(&self, x: Var, width: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.cols() != 1 || width == 0 {
                return Err(Error::shape(
                    "expand_cols",
                    format!("{} to width {width}", fmt_shape(xv.shape())),
                ));
            }
            let data = xv
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, width))
                .collect();
            Tensor::new(xv.rows(), width, data)?
        };
        Ok(self.push(out, Op::ExpandCols(x), self.rg(x)))
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if len == 0 || start + len > xv.cols() {
                return Err(Error::shape(
                    "slice_cols",
                    format!("columns {start}..{} of {}", start + len, fmt_shape(xv.shape())),
                ));
            }
            let mut data = Vec::with_capacity(xv.rows() * len);
            for r in 0..xv.rows() {
                data.extend_from_slice(&xv.row_slice(r)[start..start + len]);
            }
            Tensor::new(xv.rows(), len, data)?
        };
        Ok(self.push(out, Op::SliceCols(x, start), self.rg(x)))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push(out, Op::Scale(x, c), self.rg(x))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), self.rg(x))
    }

    pub fn neg(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.push(out, Op::Neg(x), self.rg(x))
    }

    /// Applies an elementwise function. `log` needs positive input and
    /// `recip` needs non-zero input; anything else is a domain error.
    pub fn unary(&self, x: Var, op: Unary) -> Result<Var> {
        let out = {
            let xv = self.value(x);
            match op {
                Unary::Log => {
                    if let Some(bad) = xv.data().iter().find(|&&v| !(v > 0.0)) {
                        return Err(Error::domain(op.name(), format!("non-positive input {bad}")));
                    }
                }
                Unary::Recip => {
                    if xv.data().iter().any(|&v| v == 0.0) {
                        return Err(Error::domain(op.name(), "zero input"));
                    }
                }
                _ => {}
            }
            xv.map(|v| op.forward(v))
        };
        Ok(self.push(out, Op::Unary(x, op), self.rg(x)))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu has no domain restriction")
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("sigmoid has no domain restriction")
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh has no domain restriction")
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp has no domain restriction")
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus).expect("softplus has no domain restriction")
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, Unary::Sin).expect("sin has no domain restriction")
    }

    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, Unary::Cos).expect("cos has no domain restriction")
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square).expect("square has no domain restriction")
    }

    pub fn recip(&self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Recip)
    }

    /// Sum of all elements as a `1×1` tensor.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let xv = self.value(x);
            xv.sum() / xv.len() as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(x), self.rg(x))
    }

    /// Per-column standardization with batch statistics (population variance).
    /// There is no affine part; callers scale the output themselves.
    pub fn batchnorm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let xv = self.value(x);
            let (b, d) = (xv.rows(), xv.cols());
            if b < 2 {
                return Err(Error::shape(
                    "batchnorm",
                    format!("batch of {b} rows; training-mode normalization needs at least 2"),
                ));
            }
            let mut mean = vec![0.0; d];
            for r in 0..b {
                for (m, v) in mean.iter_mut().zip(xv.row_slice(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; d];
            for r in 0..b {
                for ((s, v), m) in var.iter_mut().zip(xv.row_slice(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / b as f64 + eps).sqrt()).collect();
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % d]) * inv_std[i % d])
                .collect();
            let xhat = Tensor::new(b, d, data)?;
            (xhat.clone(), xhat, inv_std)
        };
        Ok(self.push(out, Op::BatchNorm { x, xhat, inv_std }, self.rg(x)))
    }

    /// Reverse pass from a scalar `loss`. Gradients of a node used several
    /// times accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !is_scalar(&root.value) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}", fmt_shape(root.value.shape())),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = std::iter::repeat_with(|| None).take(loss.0 + 1).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only leaves that asked for gradients keep them visible.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Reduces a broadcast gradient back to the shape of a scalar operand.
fn unbroadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::scalar(g.sum())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(a.rows(), a.cols(), data).expect("shapes agree")
    } else if is_scalar(b) {
        let q = b.item();
        a.map(|p| f(p, q))
    } else {
        let p = a.item();
        b.map(|q| f(p, q))
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if rg(*a) {
                let mut da = Tensor::zeros(m, k);
                gemm(
                    m,
                    n,
                    k,
                    Operand::plain(g.data(), n),
                    Operand::transposed(bv.data(), n),
                    da.data_mut(),
                    0.0,
                );
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let mut db = Tensor::zeros(k, n);
                gemm(
                    k,
                    m,
                    n,
                    Operand::transposed(av.data(), k),
                    Operand::plain(g.data(), n),
                    db.data_mut(),
                    0.0,
                );
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, unbroadcast(g, val(*a)));
            accumulate(nodes, grads, *b, unbroadcast(g, val(*b)));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, unbroadcast(g, val(*a)));
            accumulate(nodes, grads, *b, unbroadcast(&g.map(|v| -v), val(*b)));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let full = zip_map(g, bv, |p, q| p * q);
                accumulate(nodes, grads, *a, unbroadcast(&full, av));
            }
            if rg(*b) {
                let full = zip_map(g, av, |p, q| p * q);
                accumulate(nodes, grads, *b, unbroadcast(&full, bv));
            }
        }
        Op::AddRow(x, row) => {
            accumulate(nodes, grads, *x, g.clone());
            if rg(*row) {
                accumulate(nodes, grads, *row, column_sums(g));
            }
        }
        Op::MulRow(x, row) => {
            let (xv, rv) = (val(*x), val(*row));
            let cols = xv.cols();
            if rg(*x) {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * rv.data()[i % cols])
                    .collect();
                accumulate(nodes, grads, *x, Tensor::new(xv.rows(), cols, data).unwrap());
            }
            if rg(*row) {
                let prod = zip_map(g, xv, |p, q| p * q);
                accumulate(nodes, grads, *row, column_sums(&prod));
            }
        }
        Op::ExpandCols(x) => {
            let data = (0..g.rows()).map(|r| g.row_slice(r).iter().fold(0.0, |a, v| a + v)).collect();
            accumulate(nodes, grads, *x, Tensor::new(g.rows(), 1, data).unwrap());
        }
        Op::SliceCols(x, start) => {
            let xv = val(*x);
            let mut dx = Tensor::zeros(xv.rows(), xv.cols());
            let (len, cols) = (g.cols(), xv.cols());
            for r in 0..g.rows() {
                dx.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(g.row_slice(r));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| c * v)),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::Neg(x) => accumulate(nodes, grads, *x, g.map(|v| -v)),
        Op::Unary(x, op) => {
            let xv = val(*x);
            let yv = &node.value;
            let data = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(yv.data())
                .map(|((gv, &xi), &yi)| gv * op.derivative(xi, yi))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.rows(), xv.cols(), data).unwrap());
        }
        Op::Sum(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(xv.rows(), xv.cols(), g.item()));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let v = g.item() / xv.len() as f64;
            accumulate(nodes, grads, *x, Tensor::full(xv.rows(), xv.cols(), v));
        }
        Op::BatchNorm { x, xhat, inv_std } => {
            let (b, d) = (xhat.rows(), xhat.cols());
            let mut sum_g = vec![0.0; d];
            let mut sum_gx = vec![0.0; d];
            for r in 0..b {
                for c in 0..d {
                    let gv = g.get(r, c);
                    sum_g[c] += gv;
                    sum_gx[c] += gv * xhat.get(r, c);
                }
            }
            let bf = b as f64;
            let data = (0..b * d)
                .map(|i| {
                    let c = i % d;
                    inv_std[c] / bf * (bf * g.data()[i] - sum_g[c] - xhat.data()[i] * sum_gx[c])
                })
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(b, d, data).unwrap());
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

/// Outcome of an [`sgd_step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or ±∞; no parameter was touched.
    AbortedNonFinite,
}

/// Plain SGD with L2 weight decay: `p ← p − lr·(g + weight_decay·p)`.
///
/// All gradients are checked before any parameter is modified.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<StepOutcome> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::domain("sgd_step", format!("learning rate {lr} must be finite and >= 0")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("parameter {} vs gradient {}", fmt_shape(p.shape()), fmt_shape(g.shape())),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::AbortedNonFinite);
    }
    if lr == 0.0 {
        return Ok(StepOutcome::Applied);
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (gv + weight_decay * *pv);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v)
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn sigmoid_at_two() {
        assert!((sigmoid(2.0) - 0.880797).abs() < 5e-7);
    }

    #[test]
    fn relu_negative_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(-3.0));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).item(), 0.0);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
        let x = tape.param(row(&[-1.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn sum_gives_all_ones() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, -2.0, 3.0]));
        let l = tape.sum(x);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn power_rule() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0, 3.0]));
        let l = tape.sum(tape.square(x));
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn two_consumers_accumulate() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.5, -0.5]));
        let a = tape.scale(x, 3.0);
        let b = tape.square(x);
        let l = tape.sum(tape.add(a, b).unwrap());
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0 + 3.0, 3.0 - 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        let c = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, c).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0]);
        let g = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(g.get(c).unwrap().item(), 3.0);
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        let bad = tape.param(row(&[1.0, 2.0, 3.0]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn batchnorm_constant_column_is_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap());
        let y = tape.batchnorm(x, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_standardized_column() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(2, 1, vec![-1.0, 1.0]).unwrap());
        let y = tape.batchnorm(x, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_eq!(tape.value(y).data(), &[-expected, expected]);
    }

    #[test]
    fn batchnorm_single_row_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        assert!(tape.batchnorm(x, 1e-5).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), 0.1, 0.0).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[g], 0.0, 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_aborts_on_non_finite() {
        let mut p = Tensor::row(&[1.0, 2.0]);
        let mut q = Tensor::scalar(5.0);
        let out = sgd_step(
            &mut [&mut q, &mut p],
            &[Tensor::scalar(1.0), Tensor::row(&[f64::NAN, 0.0])],
            0.1,
            0.0,
        )
        .unwrap();
        assert_eq!(out, StepOutcome::AbortedNonFinite);
        assert_eq!(q.item(), 5.0);
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_converges_on_quadratic_bowl() {
        // f(p) = sum((p - c)^2), minimum at c.
        let c = [1.5, -2.0, 0.25];
        let mut p = Tensor::row(&[0.0, 0.0, 0.0]);
        let mut steps = 0;
        while steps < 200 {
            let tape = Tape::new();
            let pv = tape.param(p.clone());
            let cv = tape.constant(Tensor::row(&c));
            let loss = tape.sum(tape.square(tape.sub(pv, cv).unwrap()));
            let g = tape.backward(loss).unwrap().get(pv).unwrap().clone();
            sgd_step(&mut [&mut p], &[g], 0.1, 0.0).unwrap();
            steps += 1;
            if p.data().iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-6) {
                break;
            }
        }
        assert!(steps <= 200);
        for (a, b) in p.data().iter().zip(&c) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_visits_in_reverse_order_only_from_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let l = tape.square(x);
        // A node recorded after the loss must not contribute.
        let _later = tape.scale(x, 100.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }
}
