//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]. Node indices are handed
//! out in creation order, so walking the node list backwards visits every
//! node after all of its consumers and each node exactly once.

use std::fmt;

use super::matrix::{dot, Matrix};
use crate::error::{PawsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-defined operation: given the upstream gradient and
/// the input values, return one gradient per input (same shapes as inputs).
pub type CustomBackward = Box<dyn Fn(&Matrix, &[&Matrix], &Matrix) -> Vec<Matrix>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log { input: Var, floor: f64 },
    Exp(Var),
    Pow { input: Var, exponent: f64, floor: f64 },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowMean(Var),
    ConcatRows(Vec<Var>),
    SliceRows { input: Var, start: usize },
    RowL2Normalize { input: Var, norms: Vec<f64>, eps: f64 },
    SoftmaxRows { input: Var, tau: f64 },
    NormalizeRowSum { input: Var, sums: Vec<f64> },
    CrossEntropyRows { target: Matrix, pred: Var, floor: f64 },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
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

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros when nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a 1×m row vector to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(PawsError::Shape(format!(
                "add_row of {}x{} and {}x{}",
                av.rows(),
                av.cols(),
                rv.rows(),
                rv.cols()
            )));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `log(max(a, floor))`; entries at or below the floor get zero gradient.
    pub fn log(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(&[a]);
        self.push(value, Op::Log { input: a, floor }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// `max(a, floor)^exponent` for non-negative inputs, evaluated as
    /// `exp(exponent · ln(max(a, floor)))`.
    pub fn pow(&mut self, a: Var, exponent: f64, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return Err(PawsError::Domain(format!("pow floor must be positive, got {floor}")));
        }
        let value = self.value(a).map(|x| (exponent * x.max(floor).ln()).exp());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Pow { input: a, exponent, floor }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Average over rows: n×m → 1×m.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Average within each row: n×m → n×1.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.cols() as f64;
        let value = Matrix::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum::<f64>() / m);
        let rg = self.rg(&[a]);
        self.push(value, Op::RowMean(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::vstack(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows() {
            return Err(PawsError::Shape(format!("row slice {start}..{end} of a {}x{} matrix", av.rows(), av.cols())));
        }
        let value = av.slice_rows(start, end);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows { input: a, start }, rg))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let n = dot(av.row(r), av.row(r)).sqrt();
            let d = n.max(eps);
            value.row_mut(r).iter_mut().for_each(|x| *x /= d);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowL2Normalize { input: a, norms, eps }, rg)
    }

    /// Row-wise `softmax(a / tau)` with max subtraction.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(PawsError::Domain(format!("softmax temperature must be > 0, got {tau}")));
        }
        let value = softmax_rows_value(self.value(a), tau);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows { input: a, tau }, rg))
    }

    /// Divides each row by its sum. Rows must have positive sums.
    pub fn normalize_row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sums = av.row_sums();
        if let Some(r) = sums.iter().position(|&s| !(s > 0.0)) {
            return Err(PawsError::Validation(format!("row {r} has non-positive sum {}", sums[r])));
        }
        let mut value = av.clone();
        for (r, &s) in sums.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::NormalizeRowSum { input: a, sums }, rg))
    }

    /// Mean over rows of `H(target_i, pred_i) = -Σ_k target_ik · log(max(pred_ik, floor))`.
    ///
    /// The target is a plain matrix, so no gradient can reach whatever produced it.
    pub fn cross_entropy_rows(&mut self, target: &Matrix, pred: Var, floor: f64) -> Result<Var> {
        let pv = self.value(pred);
        target.expect_same_shape(pv, "cross_entropy_rows")?;
        for (r, s) in target.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > 1e-9 {
                return Err(PawsError::Validation(format!("target row {r} sums to {s}, not 1")));
            }
        }
        if let Some(x) = pv.data().iter().find(|&&x| x < 0.0) {
            return Err(PawsError::Validation(format!("negative prediction entry {x}")));
        }
        let n = pv.rows().max(1) as f64;
        let total: f64 = target
            .data()
            .iter()
            .zip(pv.data())
            .map(|(&t, &p)| if t == 0.0 { 0.0 } else { -t * p.max(floor).ln() })
            .sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(Matrix::scalar(total / n), Op::CrossEntropyRows { target: target.clone(), pred, floor }, rg))
    }

    /// Records an operation whose value and backward rule are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, backward: CustomBackward) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg)
    }

    /// Accumulates `∂loss/∂v` into every node that requires gradient.
    ///
    /// Gradients add up across calls; use [`Tape::zero_grad`] between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(PawsError::Shape(format!("backward needs a scalar loss, got {}x{}", shape.0, shape.1)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.axpy(1.0, &g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Matrix| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.axpy(1.0, &contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = G·Bᵀ, dB = Aᵀ·G
                if self.nodes[a.0].requires_grad {
                    send(*a, g.matmul_bt(self.value(*b))?)?;
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, self.value(*a).matmul_at(g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                if self.nodes[a.0].requires_grad {
                    send(*a, g.matmul(self.value(*b))?)?;
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, g.matmul_at(self.value(*a))?)?;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose())?,
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone())?;
                send(*row, g.mean_rows().scale(g.rows() as f64))?;
            }
            Op::Hadamard(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                send(*b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
            }
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::AddScalar(a) => send(*a, g.clone())?,
            Op::Log { input, floor } => {
                let x = self.value(*input);
                let floor = *floor;
                send(*input, g.zip_map(x, |gi, xi| if xi > floor { gi / xi } else { 0.0 })?)?;
            }
            Op::Exp(a) => send(*a, g.zip_map(out, |gi, yi| gi * yi)?)?,
            Op::Pow { input, exponent, floor } => {
                let x = self.value(*input);
                let (e, floor) = (*exponent, *floor);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for ((dk, (&xi, &yi)), &gi) in
                    d.data_mut().iter_mut().zip(x.data().iter().zip(out.data())).zip(g.data())
                {
                    if xi > floor {
                        *dk = gi * e * yi / xi;
                    }
                }
                send(*input, d)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64))?;
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = 1.0 / r as f64;
                send(*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv))?;
            }
            Op::RowMean(a) => {
                let (r, c) = self.value(*a).shape();
                let inv = 1.0 / c as f64;
                send(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0) * inv))?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        send(p, g.slice_rows(start, start + rows))?;
                    }
                    start += rows;
                }
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                let c = x.cols();
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                send(*input, d)?;
            }
            Op::RowL2Normalize { input, norms, eps } => {
                // y = x/n for n > eps: dx = (g - y (y·g)) / n; otherwise dx = g/eps.
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for (r, &n) in norms.iter().enumerate() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dr = d.row_mut(r);
                    if n > *eps {
                        let yg = dot(y, gr);
                        for ((dk, &yk), &gk) in dr.iter_mut().zip(y).zip(gr) {
                            *dk = (gk - yk * yg) / n;
                        }
                    } else {
                        for (dk, &gk) in dr.iter_mut().zip(gr) {
                            *dk = gk / eps;
                        }
                    }
                }
                send(*input, d)?;
            }
            Op::SoftmaxRows { input, tau } => {
                // dx = y ⊙ (g − (y·g)) / τ
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let yg = dot(y, gr);
                    for ((dk, &yk), &gk) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dk = yk * (gk - yg) / tau;
                    }
                }
                send(*input, d)?;
            }
            Op::NormalizeRowSum { input, sums } => {
                // y = x/s: dx = (g − (y·g)) / s
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for (r, &s) in sums.iter().enumerate() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let yg = dot(y, gr);
                    for (dk, &gk) in d.row_mut(r).iter_mut().zip(gr) {
                        *dk = (gk - yg) / s;
                    }
                }
                send(*input, d)?;
            }
            Op::CrossEntropyRows { target, pred, floor } => {
                let p = self.value(*pred);
                let scale = g.item() / p.rows().max(1) as f64;
                let floor = *floor;
                let d = target.zip_map(p, |t, pi| if pi > floor { -scale * t / pi } else { 0.0 })?;
                send(*pred, d)?;
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                let ds = backward(g, &vals, out);
                if ds.len() != inputs.len() {
                    return Err(PawsError::Shape(format!(
                        "custom backward returned {} gradients for {} inputs",
                        ds.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(ds) {
                    self.value(v).expect_same_shape(&d, "custom backward")?;
                    send(v, d)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows_value(a: &Matrix, tau: f64) -> Matrix {
    let mut value = a.clone();
    for r in 0..value.rows() {
        let row = value.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = ((*x - max) / tau).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    value
}
