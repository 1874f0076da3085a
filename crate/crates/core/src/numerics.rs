//! Dense double-precision kernels shared by importance scoring and the ADMM
//! solver: SPD factorization and solve, matrix products, damped inverse
//! diagonals.
//!
//! All solver math runs in f64 regardless of the model's forward precision;
//! Gram matrices accumulated over long calibration runs are ill-conditioned
//! enough that a single-precision inverse is not reliable.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged row in Matrix::from_rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape does not match data length");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self * other`, plain triple loop ordered for row-major locality.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v *= c;
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d += s;
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (d, s) in out.data.iter_mut().zip(&other.data) {
            *d -= s;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replace with the symmetric average `(A + Aᵀ)/2`; accumulation
    /// round-off leaves captured Grams slightly asymmetric.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn mean_diag(&self) -> f64 {
        let n = self.rows.min(self.cols);
        if n == 0 {
            return 0.0;
        }
        self.diag().iter().sum::<f64>() / n as f64
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    dim: usize,
    /// Row-major lower triangle, full square storage.
    lower: Vec<f64>,
}

impl SpdFactor {
    /// Factor a symmetric positive-definite matrix. The input is symmetrized
    /// before factorization.
    pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
        assert_eq!(a.rows(), a.cols(), "cholesky requires a square matrix");
        let n = a.rows();
        let mut sym = a.clone();
        sym.symmetrize();
        // pivots below rounding noise mean the matrix is numerically
        // singular, not merely small
        let mut floor = 0.0f64;
        for i in 0..n {
            floor = floor.max(sym.get(i, i).abs());
        }
        floor *= 1e-12;
        let mut l = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = sym.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= floor || s.is_nan() {
                        return Err(Error::NotPositiveDefinite { index: i, pivot: s });
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(SpdFactor { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reconstruct `L·Lᵀ` (test and diagnostics surface).
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim;
        Matrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for k in 0..=i.min(j) {
                s += self.lower[i * n + k] * self.lower[j * n + k];
            }
            s
        })
    }

    /// Solve `A·y = b` in place for one right-hand side.
    pub fn solve_vec(&self, b: &mut [f64]) {
        let n = self.dim;
        assert_eq!(b.len(), n);
        // forward: L v = b
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
        // backward: Lᵀ y = v
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Solve `A·Y = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.dim, "solve_matrix shape mismatch");
        let mut out = Matrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0f64; self.dim];
        for j in 0..b.cols() {
            for i in 0..b.rows() {
                col[i] = b.get(i, j);
            }
            self.solve_vec(&mut col);
            for i in 0..b.rows() {
                out.set(i, j, col[i]);
            }
        }
        out
    }
}

/// Solve `A·Y = B` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "spd_solve: A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let factor = SpdFactor::cholesky(a)?;
    Ok(factor.solve_matrix(b))
}

/// Diagonal of `(2G + λI)⁻¹` for a symmetric PSD Gram matrix `G`.
///
/// This is the denominator of the per-element importance score; entries are
/// strictly positive whenever the damped matrix is positive definite.
pub fn damped_gram_inverse_diag(g: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    assert_eq!(g.rows(), g.cols(), "gram matrix must be square");
    let n = g.rows();
    let mut a = g.scaled(2.0);
    for i in 0..n {
        a.set(i, i, a.get(i, i) + lambda);
    }
    let factor = SpdFactor::cholesky(&a)?;
    // [A⁻¹]_{jj} = ‖L⁻¹ e_j‖²: one forward substitution per column.
    let mut diag = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    for j in 0..n {
        for x in v.iter_mut() {
            *x = 0.0;
        }
        v[j] = 1.0;
        for i in j..n {
            let mut s = v[i];
            for k in j..i {
                s -= factor.lower[i * n + k] * v[k];
            }
            v[i] = s / factor.lower[i * n + i];
        }
        let mut acc = 0.0;
        for x in &v[j..] {
            acc += x * x;
        }
        if acc <= 0.0 || acc.is_nan() {
            return Err(Error::NotPositiveDefinite { index: j, pivot: acc });
        }
        diag[j] = acc;
    }
    Ok(diag)
}

/// Damping ladder used wherever a possibly-singular Gram must be inverted:
/// try λ = 0 first, then `0.01·mean(diag G)` escalated by 10 up to three
/// times. Returns the diagonal together with the λ that succeeded.
pub fn damped_inverse_diag_auto(g: &Matrix) -> Result<(Vec<f64>, f64)> {
    let base = 0.01 * g.mean_diag();
    let mut lambdas = vec![0.0];
    if base > 0.0 {
        lambdas.extend([base, base * 10.0, base * 100.0]);
    } else {
        // all-zero Gram: fall back to an absolute floor
        lambdas.push(1e-8);
    }
    let mut last = Error::NotPositiveDefinite { index: 0, pivot: 0.0 };
    for &lambda in &lambdas {
        match damped_gram_inverse_diag(g, lambda) {
            Ok(d) => return Ok((d, lambda)),
            Err(e) => last = e,
        }
    }
    Err(last)
}
