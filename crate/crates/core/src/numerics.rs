//! Dense kernels for the main model's forward pass.
//!
//! Every reduction runs in index-ascending order so that results are
//! bit-reproducible across platforms and across the full and incremental
//! (fault-replay) forward paths.

use crate::error::{CcedError, Result};

/// Borrowed row-major matrix, usually a window into a flat parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub values: &'a [f32],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, values: &'a [f32]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(CcedError::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Owned row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        MatrixView::new(rows, cols, &values)?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            rows: self.rows,
            cols: self.cols,
            values: &self.values,
        }
    }
}

/// One output unit of an affine map: `row · x + bias`, summed index-ascending.
#[inline]
pub fn dot_bias(row: &[f32], bias: f32, x: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (w, xi) in row.iter().zip(x) {
        acc += w * xi;
    }
    acc + bias
}

/// `W·x + b`.
pub fn affine(w: MatrixView<'_>, b: &[f32], x: &[f32]) -> Result<Vec<f32>> {
    if w.cols != x.len() {
        return Err(CcedError::shape(format!(
            "affine: matrix has {} columns but input has length {}",
            w.cols,
            x.len()
        )));
    }
    if w.rows != b.len() {
        return Err(CcedError::shape(format!(
            "affine: matrix has {} rows but bias has length {}",
            w.rows,
            b.len()
        )));
    }
    Ok((0..w.rows).map(|r| dot_bias(w.row(r), b[r], x)).collect())
}

/// Rectifier on a single value; NaN passes through.
#[inline]
pub fn relu_scalar(v: f32) -> f32 {
    if v > 0.0 || v.is_nan() {
        v
    } else {
        0.0
    }
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().copied().map(relu_scalar).collect()
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        *v = relu_scalar(*v);
    }
}

/// Max-stabilized softmax.
///
/// Any NaN input, or all inputs at `-inf`, yields an all-NaN vector. Inputs at
/// `+inf` share the whole mass equally (the limit of the finite case).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(CcedError::shape("softmax of an empty vector"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Ok(vec![f32::NAN; logits.len()]);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Ok(vec![f32::NAN; logits.len()]);
    }
    if max == f32::INFINITY {
        let n_inf = logits.iter().filter(|v| **v == f32::INFINITY).count() as f64;
        return Ok(logits
            .iter()
            .map(|v| if *v == f32::INFINITY { (1.0 / n_inf) as f32 } else { 0.0 })
            .collect());
    }
    let max = max as f64;
    let exps: Vec<f64> = logits.iter().map(|v| (*v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as f32).collect())
}

/// Index of the largest element, lowest index on ties. `None` marks an
/// invalid prediction (some element is NaN).
pub fn argmax(x: &[f32]) -> Result<Option<usize>> {
    if x.is_empty() {
        return Err(CcedError::shape("argmax of an empty vector"));
    }
    if x.iter().any(|v| v.is_nan()) {
        return Ok(None);
    }
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    Ok(Some(best))
}
