//! Dense row-major matrices and the handful of kernels the encoder needs.
//!
//! Every kernel has a fixed accumulation order so results are bitwise
//! reproducible for the same inputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![F::ZERO; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn from N(0, std^2).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| F::from_f64(standard_normal(rng) * std))
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out (n x m) = x (n x k) * w (k x m)`, overwriting `out`.
pub fn matmul<F: Real>(x: &[F], n: usize, w: &Matrix<F>, out: &mut [F]) {
    let (k, m) = w.shape();
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(out.len(), n * m);
    out.iter_mut().for_each(|v| *v = F::ZERO);
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (p, &xv) in xi.iter().enumerate() {
            if xv != F::ZERO {
                axpy(xv, w.row(p), oi);
            }
        }
    }
}

/// `grad_w (k x m) += x^T (k x n) * dout (n x m)`.
pub fn accumulate_outer<F: Real>(x: &[F], n: usize, dout: &[F], grad_w: &mut Matrix<F>) {
    let (k, m) = grad_w.shape();
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(dout.len(), n * m);
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let di = &dout[i * m..(i + 1) * m];
        for (p, &xv) in xi.iter().enumerate() {
            if xv != F::ZERO {
                axpy(xv, di, grad_w.row_mut(p));
            }
        }
    }
}

/// `dx (n x k) = dout (n x m) * w^T`, overwriting `dx`.
pub fn matmul_transposed<F: Real>(dout: &[F], n: usize, w: &Matrix<F>, dx: &mut [F]) {
    let (k, m) = w.shape();
    debug_assert_eq!(dout.len(), n * m);
    debug_assert_eq!(dx.len(), n * k);
    for i in 0..n {
        let di = &dout[i * m..(i + 1) * m];
        for p in 0..k {
            dx[i * k + p] = dot(di, w.row(p));
        }
    }
}

/// Box-Muller standard normal sample.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2);
    }
}
