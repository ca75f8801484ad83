//! Dense 64-bit vectors and matrices plus the differentiable primitives the
//! engine is built from.
//!
//! The free functions here are the value-only forward path. [`crate::tape`]
//! records the same kernels together with their reverse-mode rules.

use std::ops::Deref;

use crate::data::Label;
use crate::error::{Error, Result};

/// Non-empty vector of finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::dim("Vec64::new", "len > 0", 0));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite entry at index {i}")));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self::filled(len, 0.0)
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "Vec64 must be non-empty");
        Self(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self(data)
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

/// Row-major matrix of finite 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dim("Mat64::new", "rows, cols > 0", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dim("Mat64::new", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "Mat64 must be non-empty");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Usage("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Mat64 {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Mat64 {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }
}

// ---------------------------------------------------------------------------
// Slice kernels shared by the forward path and the tape.
// ---------------------------------------------------------------------------

/// `out = W x` for row-major `W` of shape rows x cols.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out = W^T x` for row-major `W` of shape rows x cols.
pub(crate) fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for r in 0..rows {
        let xr = x[r];
        if xr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * xr;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-softmax of the outer product `q k^T`, returned row-major (H x H).
pub(crate) fn outer_softmax_weights(q: &[f64], k: &[f64]) -> Vec<f64> {
    let h = q.len();
    let mut weights = vec![0.0; h * h];
    for i in 0..h {
        let row = &mut weights[i * h..(i + 1) * h];
        for (j, s) in row.iter_mut().enumerate() {
            *s = q[i] * k[j];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    weights
}

pub(crate) fn attend_with(weights: &[f64], v: &[f64]) -> Vec<f64> {
    let h = v.len();
    (0..h).map(|i| dot(&weights[i * h..(i + 1) * h], v)).collect()
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Public primitives.
// ---------------------------------------------------------------------------

/// `y = W x`.
pub fn affine(w: &Mat64, x: &Vec64) -> Result<Vec64> {
    if w.cols != x.len() {
        return Err(Error::dim("affine", w.cols, x.len()));
    }
    let mut out = vec![0.0; w.rows];
    matvec(&w.data, w.rows, w.cols, x, &mut out);
    Ok(Vec64::from_raw(out))
}

/// `y = W^T x`.
pub fn affine_transposed(w: &Mat64, x: &Vec64) -> Result<Vec64> {
    if w.rows != x.len() {
        return Err(Error::dim("affine_transposed", w.rows, x.len()));
    }
    let mut out = vec![0.0; w.cols];
    matvec_t(&w.data, w.rows, w.cols, x, &mut out);
    Ok(Vec64::from_raw(out))
}

/// Single-token cross attention over the hidden axis: `a = softmax_rows(q k^T) v`.
///
/// Scores form an H x H outer product, each row is normalized over the key
/// index, and no temperature is applied.
pub fn outer_softmax_attend(q: &Vec64, k: &Vec64, v: &Vec64) -> Result<Vec64> {
    if q.len() != k.len() || k.len() != v.len() {
        return Err(Error::dim(
            "outer_softmax_attend",
            format!("equal lengths {}", q.len()),
            format!("k={}, v={}", k.len(), v.len()),
        ));
    }
    let w = outer_softmax_weights(q, k);
    Ok(Vec64::from_raw(attend_with(&w, v)))
}

pub fn softplus(x: &Vec64) -> Vec64 {
    Vec64::from_raw(x.iter().map(|&v| softplus_scalar(v)).collect())
}

/// Binary cross-entropy on a logit, `ln(1 + exp(-s * logit))` with `s = +1`
/// for fake and `-1` for real.
pub fn bce_with_logit(logit: f64, y: Label) -> f64 {
    softplus_scalar(-y.sign() * logit)
}

/// Elementwise product.
pub fn hadamard(a: &Vec64, b: &Vec64) -> Result<Vec64> {
    if a.len() != b.len() {
        return Err(Error::dim("hadamard", a.len(), b.len()));
    }
    Ok(Vec64::from_raw(a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()))
}
