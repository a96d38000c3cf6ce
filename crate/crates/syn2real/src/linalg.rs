//! Small dense linear algebra kernels: row-major matrices, Cholesky
//! factorization with triangular solves, and symmetric eigenvalues.
//!
//! Everything is `f64` and single-threaded; the hot loops are written so the
//! compiler can vectorize them (contiguous slices, fixed accumulation order),
//! which also keeps results bitwise reproducible from run to run.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                axpy(out_row, a, other.row(k));
            }
        }
        out
    }

    /// `self * other^T`; both operands are read row-wise, which is the
    /// cache-friendly orientation for Gram-style products.
    pub fn mul_bt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "mul_bt inner dimension");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(self.row(i), other.row(j));
            }
        }
        out
    }

    pub fn add_diag(&mut self, v: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dot product with a fixed accumulation order (8-lane partial sums).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`, elementwise over equal-length slices.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..4 {
            let d = xa[k] - xb[k];
            acc[k] += d * d;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Chol {
    l: Mat,
}

impl Chol {
    /// Factor `a = L L^T`, reading only the lower triangle of `a`.
    ///
    /// Fails with `Error::Factorization` (empty ladder; callers that escalate
    /// jitter report the full ladder) when a pivot is not strictly positive.
    pub fn factor(a: &Mat) -> Result<Chol> {
        assert_eq!(a.rows, a.cols, "cholesky needs a square matrix");
        let n = a.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            // Rows < i of `l` are final; row i is built in place.
            let (done, cur) = l.data.split_at_mut(i * n);
            let row_i = &mut cur[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + j];
                let s = a.at(i, j) - dot(&row_i[..j], row_j);
                row_i[j] = s / done[j * n + j];
            }
            let d = a.at(i, i) - dot(&row_i[..i], &row_i[..i]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization { ladder: vec![] });
            }
            row_i[i] = d.sqrt();
        }
        Ok(Chol { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn lower(&self) -> &Mat {
        &self.l
    }

    /// Solve `A x = b` for all columns of `b` (forward then backward
    /// substitution against the stored factor; no explicit inverse).
    pub fn solve(&self, b: &Mat) -> Mat {
        assert_eq!(b.rows, self.l.rows, "rhs row count");
        let n = self.l.rows;
        let k = b.cols;
        let mut x = b.clone();
        // L y = b
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * k);
            let xi = &mut rest[..k];
            let li = self.l.row(i);
            for j in 0..i {
                axpy(xi, -li[j], &done[j * k..(j + 1) * k]);
            }
            let inv = 1.0 / li[i];
            for v in xi.iter_mut() {
                *v *= inv;
            }
        }
        // L^T x = y
        for i in (0..n).rev() {
            let (head, rest) = x.data.split_at_mut((i + 1) * k);
            let xi = &mut head[i * k..];
            for j in i + 1..n {
                let lji = self.l.at(j, i);
                axpy(xi, -lji, &rest[(j - i - 1) * k..(j - i) * k]);
            }
            let inv = 1.0 / self.l.at(i, i);
            for v in xi.iter_mut() {
                *v *= inv;
            }
        }
        x
    }

    /// log det A = 2 * sum(log L_ii).
    pub fn logdet(&self) -> f64 {
        let n = self.l.rows;
        let mut s = 0.0;
        for i in 0..n {
            s += self.l.at(i, i).ln();
        }
        2.0 * s
    }
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// returned in ascending order. Intended for small matrices.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut m = a.clone();
    // Work on the symmetrized copy so tiny asymmetries cannot stall the sweep.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m.at(i, j) + m.at(j, i));
            *m.at_mut(i, j) = v;
            *m.at_mut(j, i) = v;
        }
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m.at(i, j) * m.at(i, j);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.at(k, p);
                    let akq = m.at(k, q);
                    *m.at_mut(k, p) = c * akp - s * akq;
                    *m.at_mut(k, q) = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m.at(p, k);
                    let aqk = m.at(q, k);
                    *m.at_mut(p, k) = c * apk - s * aqk;
                    *m.at_mut(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

fn frobenius(m: &Mat) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
