//! Coefficient fields: closures of (x, y, t) evaluated into caller buffers.
//!
//! All model coefficients (drifts, noise matrices, integrands) are stored as
//! [`VecField`] / [`MatField`] so the Monte Carlo loop can evaluate them
//! without allocating.  Matrix output is row-major.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Default absolute step for central finite differences of coefficient
/// fields.  Central differences are exact for affine/quadratic dependence;
/// for smooth fields the truncation error is ~1e-9 * |third derivative|.
pub const DEFAULT_FD_STEP: f64 = 5e-5;

type FieldFn = Arc<dyn Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync>;

/// Vector-valued coefficient field v(x, y, t).
#[derive(Clone)]
pub struct VecField {
    dim: usize,
    f: FieldFn,
}

impl VecField {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        VecField { dim, f: Arc::new(f) }
    }

    /// Identically zero field.
    pub fn zeros(dim: usize) -> Self {
        VecField::new(dim, move |_, _, _, out| out.fill(0.0))
    }

    pub fn constant(v: Vec<f64>) -> Self {
        VecField::new(v.len(), move |_, _, _, out| out.copy_from_slice(&v))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], y: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        (self.f)(x, y, t, out);
    }

    pub fn eval(&self, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        (self.f)(x, y, t, out.as_mut_slice());
        out
    }

    /// Pointwise sum of two fields of equal dimension.
    pub fn add(&self, other: &VecField) -> VecField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        let dim = self.dim;
        VecField::new(dim, move |x, y, t, out| {
            let mut tmp = vec![0.0; dim];
            a.eval_into(x, y, t, out);
            b.eval_into(x, y, t, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += v;
            }
        })
    }

    /// Pointwise difference self - other.
    pub fn sub(&self, other: &VecField) -> VecField {
        assert_eq!(self.dim, other.dim);
        let (a, b) = (self.clone(), other.clone());
        let dim = self.dim;
        VecField::new(dim, move |x, y, t, out| {
            let mut tmp = vec![0.0; dim];
            a.eval_into(x, y, t, out);
            b.eval_into(x, y, t, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o -= v;
            }
        })
    }

    pub fn scale(&self, s: f64) -> VecField {
        let a = self.clone();
        VecField::new(self.dim, move |x, y, t, out| {
            a.eval_into(x, y, t, out);
            for o in out.iter_mut() {
                *o *= s;
            }
        })
    }

    /// Partial derivative of component `i` with respect to x_j (central FD).
    pub fn partial_x(&self, i: usize, j: usize, x: &[f64], y: &[f64], t: f64) -> f64 {
        let h = DEFAULT_FD_STEP * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        let mut buf = vec![0.0; self.dim];
        xp[j] = x[j] + h;
        self.eval_into(&xp, y, t, &mut buf);
        let up = buf[i];
        xp[j] = x[j] - h;
        self.eval_into(&xp, y, t, &mut buf);
        (up - buf[i]) / (2.0 * h)
    }

    /// Partial derivative of component `i` with respect to y_j (central FD).
    pub fn partial_y(&self, i: usize, j: usize, x: &[f64], y: &[f64], t: f64) -> f64 {
        let h = DEFAULT_FD_STEP * (1.0 + y[j].abs());
        let mut yp = y.to_vec();
        let mut buf = vec![0.0; self.dim];
        yp[j] = y[j] + h;
        self.eval_into(x, &yp, t, &mut buf);
        let up = buf[i];
        yp[j] = y[j] - h;
        self.eval_into(x, &yp, t, &mut buf);
        (up - buf[i]) / (2.0 * h)
    }
}

/// Matrix-valued coefficient field M(x, y, t), row-major storage.
#[derive(Clone)]
pub struct MatField {
    rows: usize,
    cols: usize,
    f: FieldFn,
    /// Set when the field does not depend on (x, y, t); lets hot loops cache
    /// the value and factorizations derived from it.
    constant: bool,
}

impl MatField {
    pub fn new<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    {
        MatField {
            rows,
            cols,
            f: Arc::new(f),
            constant: false,
        }
    }

    /// Constant matrix from row-major entries.
    pub fn constant(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), rows * cols);
        MatField {
            rows,
            cols,
            f: Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&entries)),
            constant: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatField::constant(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], y: &[f64], t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows * self.cols);
        (self.f)(x, y, t, out);
    }

    pub fn eval(&self, x: &[f64], y: &[f64], t: f64) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.rows * self.cols];
        (self.f)(x, y, t, &mut buf);
        DMatrix::from_row_slice(self.rows, self.cols, &buf)
    }

    /// Partial derivative of entry (i, j) with respect to y_k (central FD).
    pub fn partial_y(&self, i: usize, j: usize, k: usize, x: &[f64], y: &[f64], t: f64) -> f64 {
        let h = DEFAULT_FD_STEP * (1.0 + y[k].abs());
        let mut yp = y.to_vec();
        let mut buf = vec![0.0; self.rows * self.cols];
        yp[k] = y[k] + h;
        self.eval_into(x, &yp, t, &mut buf);
        let up = buf[i * self.cols + j];
        yp[k] = y[k] - h;
        self.eval_into(x, &yp, t, &mut buf);
        (up - buf[i * self.cols + j]) / (2.0 * h)
    }

    /// Partial derivative of entry (i, j) with respect to x_k (central FD).
    pub fn partial_x(&self, i: usize, j: usize, k: usize, x: &[f64], y: &[f64], t: f64) -> f64 {
        let h = DEFAULT_FD_STEP * (1.0 + x[k].abs());
        let mut xp = x.to_vec();
        let mut buf = vec![0.0; self.rows * self.cols];
        xp[k] = x[k] + h;
        self.eval_into(&xp, y, t, &mut buf);
        let up = buf[i * self.cols + j];
        xp[k] = x[k] - h;
        self.eval_into(&xp, y, t, &mut buf);
        (up - buf[i * self.cols + j]) / (2.0 * h)
    }

    /// Row divergence over x: out_i = sum_j d/dx_j M_ij.  Requires cols == x dim.
    pub fn div_x(&self, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i] += self.partial_x(i, j, j, x, y, t);
            }
        }
        out
    }

    /// Row divergence over y: out_i = sum_j d/dy_j M_ij.  Requires cols == y dim.
    pub fn div_y(&self, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[i] += self.partial_y(i, j, j, x, y, t);
            }
        }
        out
    }

    /// Divergence over x of the transpose: out_i = sum_j d/dx_j M_ji.
    /// Requires rows == x dim.
    pub fn div_x_transpose(&self, x: &[f64], y: &[f64], t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.cols);
        for i in 0..self.cols {
            for j in 0..self.rows {
                out[i] += self.partial_x(j, i, j, x, y, t);
            }
        }
        out
    }
}
