//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs were
//! created earlier, so node order is a topological order and the backward
//! sweep is a single reverse scan. Nodes are addressed through [`Var`]
//! handles.
//!
//! Gradients accumulate across repeated [`Graph::backward`] calls until
//! [`Graph::zero_grad`] clears them. Kinks (`relu`, `clamp` bounds, `sqrt`
//! at zero) take subgradient 0 where the derivative is undefined or
//! infinite.

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with an analytic derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Cos,
    Sin,
    Sigmoid,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Neg,
    Square,
    Sqrt,
    Pow(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Cos => "cos",
            Unary::Sin => "sin",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Neg => "neg",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Pow(_) => "pow",
            Unary::Clamp(..) => "clamp",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Pow(p) => x.powf(p),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Neg => -1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Pow(p) => {
                if x == 0.0 {
                    if p == 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    p * x.powf(p - 1.0)
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
        }
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// `[B, F] + [F]`
    AddRow,
    /// `[B, F] * [F]`
    MulRow,
    /// `[B, F] * [B]`
    MulCol,
    /// `[B, F] / [B]`
    DivCol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Dim(usize),
}

/// Batch-norm behaviour: normalise with batch statistics (and update the
/// running estimates) or with the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics consumed and, in train mode, updated by
/// [`Graph::batchnorm`].
#[derive(Debug)]
pub struct RunningStats<'a> {
    pub mean: &'a mut [f64],
    pub var: &'a mut [f64],
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Broadcast(Var, Var, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce {
        input: Var,
        kind: Reduction,
        axis: Axis,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmaxMasked {
        input: Var,
        mask: Option<Vec<bool>>,
    },
    PickColumns {
        input: Var,
        cols: Vec<usize>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Layout of one axis: `groups` independent lanes of `len` elements, lane
/// `g` starting at `base(g)` with element stride `stride`.
struct Lanes {
    groups: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len().max(1) {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if shape.is_empty() {
            return Ok(Lanes {
                groups: 1,
                len: 1,
                inner: 1,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        Ok(Lanes {
            groups: outer * inner,
            len: shape[axis],
            inner,
        })
    }

    fn base(&self, g: usize) -> usize {
        (g / self.inner) * self.len * self.inner + g % self.inner
    }

    fn index(&self, g: usize, k: usize) -> usize {
        self.base(g) + k * self.inner
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect()
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, if any backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor shaped like `v` (zeros if absent).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Smallest distance from any relu, leaky-relu or finite clamp input on
    /// the tape to the point where that function is not differentiable.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Unary(x, f) = node.op {
                let xs = self.value(x).data();
                let d = |v: f64| match f {
                    Unary::Relu | Unary::LeakyRelu(_) => v.abs(),
                    Unary::Clamp(lo, hi) => (v - lo).abs().min((v - hi).abs()),
                    _ => f64::INFINITY,
                };
                m = xs.iter().fold(m, |m, &v| m.min(d(v)));
            }
        }
        m
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let input = self.value(x);
        check_finite(input, f.name())?;
        let mut out = Vec::with_capacity(input.len());
        for &v in input.data() {
            if matches!(f, Unary::Log) && v <= 0.0 {
                return Err(Error::Domain { op: "log", value: v });
            }
            if matches!(f, Unary::Sqrt) && v < 0.0 {
                return Err(Error::Domain { op: "sqrt", value: v });
            }
            let y = f.apply(v);
            if !y.is_finite() {
                return Err(Error::Domain { op: f.name(), value: v });
            }
            out.push(y);
        }
        let value = Tensor::new(input.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Unary(x, f), rg))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Cos)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sin)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(x, Unary::Pow(p))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(a, b, kind), rg))
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

    fn broadcast(&mut self, x: Var, v: Var, kind: Broadcast) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("broadcast")?;
        let want = match kind {
            Broadcast::AddRow | Broadcast::MulRow => cols,
            Broadcast::MulCol | Broadcast::DivCol => rows,
        };
        let vt = self.value(v);
        if vt.len() != want {
            return Err(Error::shape(
                "broadcast",
                format!("[{rows}, {cols}] against {:?}", vt.shape()),
            ));
        }
        let xv = self.value(x).data();
        let vv = vt.data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let a = xv[i * cols + j];
                data.push(match kind {
                    Broadcast::AddRow => a + vv[j],
                    Broadcast::MulRow => a * vv[j],
                    Broadcast::MulCol => a * vv[i],
                    Broadcast::DivCol => a / vv[i],
                });
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(value, Op::Broadcast(x, v, kind), rg))
    }

    /// Adds a length-`F` vector to every row of a `[B, F]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.broadcast(x, row, Broadcast::AddRow)
    }

    /// Multiplies every row of a `[B, F]` matrix elementwise by a length-`F` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.broadcast(x, row, Broadcast::MulRow)
    }

    /// Scales row `i` of a `[B, F]` matrix by entry `i` of a length-`B` vector.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.broadcast(x, col, Broadcast::MulCol)
    }

    /// Divides row `i` of a `[B, F]` matrix by entry `i` of a length-`B` vector.
    pub fn div_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.broadcast(x, col, Broadcast::DivCol)
    }

    // ── linear algebra and shape ───────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn reduce(&mut self, x: Var, kind: Reduction, axis: Axis) -> Result<Var> {
        let t = self.value(x);
        let value = match axis {
            Axis::All => {
                let s: f64 = t.data().iter().sum();
                let n = t.len().max(1) as f64;
                Tensor::scalar(match kind {
                    Reduction::Sum => s,
                    Reduction::Mean => s / n,
                })
            }
            Axis::Dim(a) => {
                if a >= t.rank() {
                    return Err(Error::InvalidAxis {
                        axis: a,
                        rank: t.rank(),
                    });
                }
                let lanes = Lanes::new(t.shape(), a)?;
                let mut out = Vec::with_capacity(lanes.groups);
                for g in 0..lanes.groups {
                    let s: f64 = (0..lanes.len).map(|k| t.data()[lanes.index(g, k)]).sum();
                    out.push(match kind {
                        Reduction::Sum => s,
                        Reduction::Mean => s / lanes.len.max(1) as f64,
                    });
                }
                Tensor::new(reduced_shape(t.shape(), a), out)?
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reduce { input: x, kind, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Sum, Axis::All)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduction::Mean, Axis::All)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduction::Sum, Axis::Dim(axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduction::Mean, Axis::Dim(axis))
    }

    // ── normalisations ────────────────────────────────────────────────

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_finite(t, "softmax")?;
        let lanes = Lanes::new(t.shape(), axis)?;
        let mut out = vec![0.0; t.len()];
        for g in 0..lanes.groups {
            let max = (0..lanes.len)
                .map(|k| t.data()[lanes.index(g, k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..lanes.len {
                let i = lanes.index(g, k);
                out[i] = (t.data()[i] - max).exp();
                z += out[i];
            }
            for k in 0..lanes.len {
                out[lanes.index(g, k)] /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { input: x, axis }, rg))
    }

    /// Row-wise log-softmax of a `[B, C]` matrix restricted to `mask`
    /// (row-major, `true` = participates). Masked-out entries are 0 and pass
    /// no gradient. A row with no active entry is all zeros.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("log_softmax")?;
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::shape("log_softmax", "mask size differs from input"));
            }
        }
        let t = self.value(x);
        check_finite(t, "log_softmax")?;
        let active = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let idx = (r * cols..(r + 1) * cols).filter(|&i| active(i));
            let max = idx
                .clone()
                .map(|i| t.data()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max + idx.clone().map(|i| (t.data()[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                out[i] = t.data()[i] - lse;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmaxMasked { input: x, mask }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.log_softmax_masked(x, None)
    }

    /// `out[i] = x[i, cols[i]]` for a `[B, C]` input.
    pub fn pick_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(x).dims2("pick_columns")?;
        if cols.len() != rows {
            return Err(Error::shape("pick_columns", "one column index per row"));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::LabelOutOfRange { label: j, classes: c });
            }
            out.push(self.value(x).data()[r * c + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::vector(out),
            Op::PickColumns {
                input: x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows (repetition allowed) of a matrix or vector.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", format!("row {bad} of {n}")));
        }
        let value = t.select_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectRows {
                input: x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Batch normalisation over the rows of a `[B, F]` matrix.
    ///
    /// Train mode normalises with the biased batch variance and moves the
    /// running estimates by `momentum` toward the batch mean and the
    /// unbiased batch variance (biased when `B == 1`). Eval mode uses the
    /// running estimates and leaves them untouched.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_>,
        mode: Mode,
    ) -> Result<Var> {
        let (b, f) = self.value(x).dims2("batchnorm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != f {
                return Err(Error::shape(
                    "batchnorm",
                    format!("{name} has {} entries for {f} features", self.value(v).len()),
                ));
            }
        }
        if running.mean.len() != f || running.var.len() != f {
            return Err(Error::shape("batchnorm", "running statistics length"));
        }
        if b == 0 {
            return Err(Error::shape("batchnorm", "empty batch"));
        }
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        mean[j] += xs[i * f + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                for i in 0..b {
                    for j in 0..f {
                        let d = xs[i * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                let unbias = if b > 1 { b as f64 / (b - 1) as f64 } else { 1.0 };
                let m = running.momentum;
                for j in 0..f {
                    running.mean[j] = (1.0 - m) * running.mean[j] + m * mean[j];
                    running.var[j] = (1.0 - m) * running.var[j] + m * var[j] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.to_vec(), running.var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + running.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut x_hat = vec![0.0; b * f];
        let mut out = vec![0.0; b * f];
        for i in 0..b {
            for j in 0..f {
                let k = i * f + j;
                x_hat[k] = (xs[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * x_hat[k] + be[j];
            }
        }
        let value = Tensor::new(vec![b, f], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every node that requires a gradient,
    /// adding into the existing gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(x, f) => {
                let xs = self.value(*x).data();
                let d = xs
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                    .collect();
                vec![(*x, d)]
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().zip(bv).map(|(gv, y)| gv * y).collect(),
                        g.iter().zip(av).map(|(gv, x)| gv * x).collect(),
                    ),
                    Binary::Div => (
                        g.iter().zip(bv).map(|(gv, y)| gv / y).collect(),
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(gv, (x, y))| -gv * x / (y * y))
                            .collect(),
                    ),
                };
                vec![(*a, da), (*b, db)]
            }
            Op::Broadcast(x, v, kind) => {
                let xt = self.value(*x);
                let (rows, cols) = (xt.rows(), xt.cols());
                let (xs, vs) = (xt.data(), self.value(*v).data());
                let mut dx = vec![0.0; rows * cols];
                let mut dv = vec![0.0; vs.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        match kind {
                            Broadcast::AddRow => {
                                dx[k] = g[k];
                                dv[c] += g[k];
                            }
                            Broadcast::MulRow => {
                                dx[k] = g[k] * vs[c];
                                dv[c] += g[k] * xs[k];
                            }
                            Broadcast::MulCol => {
                                dx[k] = g[k] * vs[r];
                                dv[r] += g[k] * xs[k];
                            }
                            Broadcast::DivCol => {
                                dx[k] = g[k] / vs[r];
                                dv[r] -= g[k] * xs[k] / (vs[r] * vs[r]);
                            }
                        }
                    }
                }
                vec![(*x, dx), (*v, dv)]
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                let bt_t = transpose_raw(bt.data(), k, n);
                let at_t = transpose_raw(at.data(), m, k);
                vec![
                    (*a, matmul_raw(g, &bt_t, m, n, k)),
                    (*b, matmul_raw(&at_t, g, k, m, n)),
                ]
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                vec![(*x, transpose_raw(g, r, c))]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Reduce { input, kind, axis } => {
                let t = self.value(*input);
                let mut d = vec![0.0; t.len()];
                match axis {
                    Axis::All => {
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / t.len().max(1) as f64,
                        };
                        d.iter_mut().for_each(|v| *v = g[0] * scale);
                    }
                    Axis::Dim(a) => {
                        let lanes = Lanes::new(t.shape(), *a).expect("validated in forward");
                        let scale = match kind {
                            Reduction::Sum => 1.0,
                            Reduction::Mean => 1.0 / lanes.len.max(1) as f64,
                        };
                        for (gi, &gv) in g.iter().enumerate().take(lanes.groups) {
                            for k in 0..lanes.len {
                                d[lanes.index(gi, k)] = gv * scale;
                            }
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::Softmax { input, axis } => {
                let lanes = Lanes::new(node.value.shape(), *axis).expect("validated in forward");
                let mut d = vec![0.0; out.len()];
                for gi in 0..lanes.groups {
                    let dot: f64 = (0..lanes.len)
                        .map(|k| {
                            let i = lanes.index(gi, k);
                            g[i] * out[i]
                        })
                        .sum();
                    for k in 0..lanes.len {
                        let i = lanes.index(gi, k);
                        d[i] = out[i] * (g[i] - dot);
                    }
                }
                vec![(*input, d)]
            }
            Op::LogSoftmaxMasked { input, mask } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let active = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let idx = (r * cols..(r + 1) * cols).filter(|&i| active(i));
                    let gsum: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        d[i] = g[i] - out[i].exp() * gsum;
                    }
                }
                vec![(*input, d)]
            }
            Op::PickColumns { input, cols } => {
                let c = self.value(*input).cols();
                let mut d = vec![0.0; self.value(*input).len()];
                for (r, &j) in cols.iter().enumerate() {
                    d[r * c + j] += g[r];
                }
                vec![(*input, d)]
            }
            Op::SelectRows { input, rows } => {
                let t = self.value(*input);
                let c = if t.rank() >= 2 { t.cols() } else { 1 };
                let mut d = vec![0.0; t.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[k * c + j];
                    }
                }
                vec![(*input, d)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (b, f) = (node.value.rows(), node.value.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for i in 0..b {
                    for j in 0..f {
                        let k = i * f + j;
                        dgamma[j] += g[k] * x_hat[k];
                        dbeta[j] += g[k];
                    }
                }
                let mut dx = vec![0.0; b * f];
                for i in 0..b {
                    for j in 0..f {
                        let k = i * f + j;
                        dx[k] = if *train {
                            gam[j] * inv_std[j] / b as f64
                                * (b as f64 * g[k] - dbeta[j] - x_hat[k] * dgamma[j])
                        } else {
                            g[k] * gam[j] * inv_std[j]
                        };
                    }
                }
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_param(g: &mut Graph, v: &[f64]) -> Var {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn cos_of_zero_is_one() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.0, 0.0]);
        let y = g.cos(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn sigmoid_value_and_slope_at_zero() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.0]);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[-1.0, 2.0]);
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn log_rejects_non_positive_and_non_finite() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0, 0.0]);
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
        let y = vec_param(&mut g, &[f64::NAN]);
        assert!(matches!(g.cos(y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[11.0]);

        let bad = g.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_of_matmul_grad_is_ones_times_b_transposed() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let b = g.constant(
            Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-3.0, 1.5]]).unwrap(),
        );
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        // row sums of B, repeated for every row of A
        let expect = [-0.5, 2.25, -1.5, -0.5, 2.25, -1.5];
        for (got, want) in g.grad(a).unwrap().iter().zip(expect) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let v = vec_param(&mut g, &[1.0, 2.0, 3.0]);
        let m = g.mean(v).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        g.backward(m).unwrap();
        for d in g.grad(v).unwrap() {
            assert_abs_diff_eq!(*d, 1.0 / 3.0, epsilon = 1e-16);
        }

        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let s0 = g.sum_axis(x, 0).unwrap();
        assert_eq!(g.value(s0).data(), &[4.0, 6.0]);
        let s1 = g.sum_axis(x, 1).unwrap();
        assert_eq!(g.value(s1).data(), &[3.0, 7.0]);
        assert!(matches!(
            g.sum_axis(x, 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let one = g.constant(Tensor::matrix(3, 1, vec![7.0, -2.0, 1e3]).unwrap());
        let s = g.softmax(one, 1).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0, 1.0]);

        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(v, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        assert!((total - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0, 2.0]);
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = vec_param(&mut g, &[3.0, 4.0]);
        let p = g.mul(c, x).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    fn bn_input(b: usize, f: usize) -> Tensor {
        let data = (0..b * f)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7 + (i % f) as f64)
            .collect();
        Tensor::matrix(b, f, data).unwrap()
    }

    #[test]
    fn batchnorm_train_standardises_and_updates_running() {
        let (b, f) = (8, 3);
        let mut g = Graph::new();
        let x = g.constant(bn_input(b, f));
        let gamma = g.param(Tensor::full(&[f], 1.0));
        let beta = g.param(Tensor::zeros(&[f]));
        let mut rm = vec![0.0; f];
        let mut rv = vec![1.0; f];
        let y = g
            .batchnorm(
                x,
                gamma,
                beta,
                RunningStats {
                    mean: &mut rm,
                    var: &mut rv,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                Mode::Train,
            )
            .unwrap();
        let out = g.value(y);
        for j in 0..f {
            let col: Vec<f64> = (0..b).map(|i| out.get2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert!(rm.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_eval_is_near_identity_with_default_stats() {
        let mut g = Graph::new();
        let x = g.constant(bn_input(4, 2));
        let gamma = g.param(Tensor::full(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = g
            .batchnorm(
                x,
                gamma,
                beta,
                RunningStats {
                    mean: &mut rm,
                    var: &mut rv,
                    momentum: 0.1,
                    eps: 1e-5,
                },
                Mode::Eval,
            )
            .unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert_abs_diff_eq!(*o, i * k, epsilon = 1e-15);
        }
        assert_eq!(rm, vec![0.0; 2]);
        assert_eq!(rv, vec![1.0; 2]);
    }

    #[test]
    fn batchnorm_rejects_mismatched_params() {
        let mut g = Graph::new();
        let x = g.constant(bn_input(4, 2));
        let gamma = g.param(Tensor::full(&[3], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let r = g.batchnorm(
            x,
            gamma,
            beta,
            RunningStats {
                mean: &mut rm,
                var: &mut rv,
                momentum: 0.1,
                eps: 1e-5,
            },
            Mode::Train,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn masked_log_softmax_ignores_masked_entries() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let mask = vec![false, true, true, true, true, false];
        let y = g.log_softmax_masked(x, Some(mask)).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[5], 0.0);
        let lse = (2.0f64.exp() + 3.0f64.exp()).ln();
        assert_abs_diff_eq!(v[1], 2.0 - lse, epsilon = 1e-14);
        assert_abs_diff_eq!(v[3], -(2.0f64).ln(), epsilon = 1e-14);
    }
}
