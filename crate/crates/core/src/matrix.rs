//! Dense row-major `f64` matrices, trainable parameters, and a central-difference
//! gradient checker.
//!
//! Sequences are stored as rows: a length-`n` token sequence in `D` dimensions is
//! an `n × D` matrix. Every operation that can fail on shape returns
//! [`Error::ShapeMismatch`] naming both operand shapes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values. Fails if the length is wrong or any
    /// value is not finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        let m = Matrix { rows, cols, data };
        m.ensure_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out.ensure_finite("matmul_nt")?;
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let n = other.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out.ensure_finite("matmul_tn")?;
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row_assign(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: row.shape(),
            });
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column sums as a `1 × cols` row.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: self.shape(),
                right: (start, end),
            });
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: self.shape(),
                right: (start, end),
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Matrix, bottom: &Matrix) -> Result<Matrix> {
        if top.cols != bottom.cols {
            return Err(Error::ShapeMismatch {
                op: "vstack",
                left: top.shape(),
                right: bottom.shape(),
            });
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Matrix {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Concatenates column blocks left to right.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if let Some(bad) = blocks.iter().find(|b| b.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hstack",
                left: blocks[0].shape(),
                right: bad.shape(),
            });
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Writes `block` into columns `start..start + block.cols`.
    pub fn set_cols(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::ShapeMismatch {
                op: "set_cols",
                left: self.shape(),
                right: block.shape(),
            });
        }
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + start..r * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(r));
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        if rows * cols != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: (rows, cols),
            });
        }
        Ok(Matrix {
            rows,
            cols,
            data: self.data,
        })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &Matrix) -> Result<Matrix> {
    if a.is_empty() {
        return Err(Error::EmptyInput("softmax_rows"));
    }
    a.ensure_finite("softmax_rows input")?;
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Reverse pass of [`softmax_rows`]: given the forward output `probs` and the
/// upstream gradient `d_probs`, returns the gradient with respect to the logits.
pub fn softmax_rows_backward(probs: &Matrix, d_probs: &Matrix) -> Result<Matrix> {
    if probs.shape() != d_probs.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows_backward",
            left: probs.shape(),
            right: d_probs.shape(),
        });
    }
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        softmax_backward_row(probs.row(r), d_probs.row(r), out.row_mut(r));
    }
    Ok(out)
}

#[inline]
pub(crate) fn softmax_backward_row(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let inner = dot(p, dp);
    for ((o, &pi), &di) in out.iter_mut().zip(p).zip(dp) {
        *o = pi * (di - inner);
    }
}

/// A matrix-valued parameter with an accumulated gradient.
///
/// Frozen parameters never change value and their gradient stays all-zero:
/// [`Param::accumulate`] is a no-op for them and [`Param::value_mut`] refuses
/// to hand out a mutable reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    value: Matrix,
    grad: Matrix,
    frozen: bool,
}

impl Param {
    pub fn trainable(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Param {
            value,
            grad,
            frozen: true,
        }
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access to the value; `None` for frozen parameters.
    pub fn value_mut(&mut self) -> Option<&mut Matrix> {
        if self.frozen {
            None
        } else {
            Some(&mut self.value)
        }
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }
}

/// Named traversal over every parameter of a model, in a fixed order.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn num_scalars(&self, trainable_only: bool) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if !trainable_only || !p.is_frozen() {
                n += p.value().len();
            }
        });
        n
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over non-frozen scalars.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Largest absolute gradient found on any frozen parameter (must be 0).
    pub frozen_grad_max: f64,
}

const GRAD_CHECK_MAX_SCALARS: usize = 10_000;

/// Compares reverse-pass gradients against central differences.
///
/// `loss_fn` must return the scalar loss and accumulate gradients into the
/// parameters of `model`; it is called once for the analytic pass and twice per
/// checked scalar.
pub fn grad_check<M, F>(model: &mut M, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    M: Parameters,
    F: FnMut(&mut M) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let total = model.num_scalars(true);
    if total > GRAD_CHECK_MAX_SCALARS {
        return Err(Error::InvalidConfig(format!(
            "grad_check over {total} scalars exceeds {GRAD_CHECK_MAX_SCALARS}"
        )));
    }

    model.zero_grads();
    let loss = loss_fn(model)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let mut analytic: Vec<(String, Matrix)> = Vec::new();
    let mut frozen_grad_max = 0.0f64;
    model.visit_params(&mut |name, p| {
        if p.is_frozen() {
            frozen_grad_max = frozen_grad_max.max(p.grad().max_abs());
        } else {
            analytic.push((name.to_string(), p.grad().clone()));
        }
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        frozen_grad_max,
    };
    for (name, grad) in &analytic {
        for idx in 0..grad.len() {
            let plus = perturbed_loss(model, name, idx, eps, &mut loss_fn)?;
            let minus = perturbed_loss(model, name, idx, -eps, &mut loss_fn)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.as_slice()[idx] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    model.zero_grads();
    Ok(report)
}

fn perturbed_loss<M, F>(model: &mut M, name: &str, idx: usize, delta: f64, loss_fn: &mut F) -> Result<f64>
where
    M: Parameters,
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut original = None;
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            if let Some(v) = p.value_mut() {
                original = Some(v.as_slice()[idx]);
                v.as_mut_slice()[idx] += delta;
            }
        }
    });
    let original = original.ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
    model.zero_grads();
    let loss = loss_fn(model);
    model.visit_params_mut(&mut |n, p| {
        if n == name {
            if let Some(v) = p.value_mut() {
                v.as_mut_slice()[idx] = original;
            }
        }
    });
    let loss = loss?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss at {name}[{idx}]")));
    }
    Ok(loss)
}
