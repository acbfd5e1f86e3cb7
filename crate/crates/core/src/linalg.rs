//! Small dense row-major matrices and the handful of factorizations the
//! filters need (LU determinant/inverse and a one-sided Jacobi SVD).
//!
//! Everything here is sized for coefficient matrices of a filtering model,
//! i.e. a few rows and columns. Nothing is blocked or vectorised.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{:e}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries supplied for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    /// `self · v` for a vector of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        out
    }

    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `vᵀ · self` for a vector of length `rows`.
    pub fn vecmat(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += vr * a;
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copies the rows and columns listed into a new matrix.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                out[(i, j)] = self[(r, c)];
            }
        }
        out
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        jacobi_svd(self).singular_values.first().copied().unwrap_or(0.0)
    }

    /// Determinant by LU with partial pivoting. Square matrices only.
    pub fn determinant(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "determinant of a non-square matrix");
        let n = self.rows;
        if n == 0 {
            return 1.0;
        }
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 {
                return 0.0;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                det = -det;
            }
            let pivot = a[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let factor = a[i * n + k] / pivot;
                if factor != 0.0 {
                    for j in k..n {
                        a[i * n + j] -= factor * a[k * n + j];
                    }
                }
            }
        }
        det
    }

    /// Gauss-Jordan inverse with partial pivoting; `None` when a pivot vanishes
    /// or the result is not finite.
    pub fn inverse(&self) -> Option<Matrix> {
        assert_eq!(self.rows, self.cols, "inverse of a non-square matrix");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut inv = Matrix::identity(n).data;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 || !a[p * n + k].is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                    inv.swap(k * n + j, p * n + j);
                }
            }
            let pivot = a[k * n + k];
            for j in 0..n {
                a[k * n + j] /= pivot;
                inv[k * n + j] /= pivot;
            }
            for i in 0..n {
                if i == k {
                    continue;
                }
                let factor = a[i * n + k];
                if factor != 0.0 {
                    for j in 0..n {
                        a[i * n + j] -= factor * a[k * n + j];
                        inv[i * n + j] -= factor * inv[k * n + j];
                    }
                }
            }
        }
        let out = Matrix {
            rows: n,
            cols: n,
            data: inv,
        };
        out.is_finite().then_some(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`, singular values sorted
/// in decreasing order. `U` is `rows × k`, `V` is `cols × k`, `k = min(rows, cols)`.
/// Thin Householder QR of a tall matrix: `a = q r` with `q` (`m × n`)
/// orthonormal columns and `r` (`n × n`) upper triangular.
pub fn qr_thin(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "qr_thin needs rows ≥ cols");
    let mut w = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let norm = (k..m).map(|i| w[(i, k)] * w[(i, k)]).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (k..m).map(|i| w[(i, k)]).collect();
        if norm > 0.0 {
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn > 0.0 {
                v.iter_mut().for_each(|x| *x /= vn);
                for j in k..n {
                    let dot: f64 = (k..m).map(|i| v[i - k] * w[(i, j)]).sum();
                    for i in k..m {
                        w[(i, j)] -= 2.0 * v[i - k] * dot;
                    }
                }
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        vs.push(v);
    }
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = w[(i, j)];
        }
    }
    // Apply the reflectors in reverse to the first n columns of the identity.
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        for j in 0..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * dot;
            }
        }
    }
    (q, r)
}

/// Inverse of an upper-triangular matrix by back substitution; `None` on a
/// zero diagonal entry.
pub fn upper_triangular_inverse(r: &Matrix) -> Option<Matrix> {
    let n = r.rows;
    if (0..n).any(|i| r[(i, i)] == 0.0) {
        return None;
    }
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / r[(j, j)];
        for i in (0..j).rev() {
            let s: f64 = (i + 1..=j).map(|k| r[(i, k)] * inv[(k, j)]).sum();
            inv[(i, j)] = -s / r[(i, i)];
        }
    }
    inv.is_finite().then_some(inv)
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are orthogonalised pairwise by plane rotations
/// until every pair is orthogonal to working precision; the column norms are
/// the singular values.
pub fn jacobi_svd(a: &Matrix) -> Svd {
    let transposed = a.rows < a.cols;
    let w = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = (w.rows, w.cols);
    let mut u = w;
    let mut v = Matrix::identity(n);

    const MAX_SWEEPS: usize = 80;
    let tol = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let up = u.data[i * n + p];
                    let uq = u.data[i * n + q];
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u.data[i * n + p];
                    let uq = u.data[i * n + q];
                    u.data[i * n + p] = c * up - s * uq;
                    u.data[i * n + q] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v.data[i * n + p];
                    let vq = v.data[i * n + q];
                    v.data[i * n + p] = c * vp - s * vq;
                    v.data[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| u.data[i * n + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    for (j, s) in sigma.iter().enumerate() {
        for i in 0..m {
            u.data[i * n + j] = if *s > 0.0 { u.data[i * n + j] / s } else { 0.0 };
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let all_rows: Vec<usize> = (0..m).collect();
    let all_v_rows: Vec<usize> = (0..n).collect();
    let u_sorted = u.select(&all_rows, &order);
    let v_sorted = v.select(&all_v_rows, &order);
    sigma = order.iter().map(|&j| sigma[j]).collect();

    if transposed {
        Svd {
            u: v_sorted,
            singular_values: sigma,
            v: u_sorted,
        }
    } else {
        Svd {
            u: u_sorted,
            singular_values: sigma,
            v: v_sorted,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(svd: &Svd) -> Matrix {
        let s = Matrix::diag(&svd.singular_values);
        svd.u.matmul(&s).matmul(&svd.v.transpose())
    }

    #[test]
    fn svd_reconstructs_tall_and_wide() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.5]]).unwrap();
        let svd = jacobi_svd(&a);
        assert!(reconstruct(&svd).max_abs_diff(&a) < 1e-13);
        let at = a.transpose();
        let svd_t = jacobi_svd(&at);
        assert!(reconstruct(&svd_t).max_abs_diff(&at) < 1e-13);
        assert!((svd.singular_values[0] - svd_t.singular_values[0]).abs() < 1e-13);
    }

    #[test]
    fn svd_of_diagonal_is_sorted_abs() {
        let a = Matrix::diag(&[0.5, -3.0, 2.0]);
        let svd = jacobi_svd(&a);
        assert_eq!(svd.singular_values, vec![3.0, 2.0, 0.5]);
    }

    #[test]
    fn svd_orthonormal_factors() {
        let a = Matrix::from_rows(&[&[2.0, -1.0, 0.3], &[0.1, 4.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 2.0, -2.0]])
            .unwrap();
        let svd = jacobi_svd(&a);
        let utu = svd.u.transpose().matmul(&svd.u);
        let vtv = svd.v.transpose().matmul(&svd.v);
        assert!(utu.max_abs_diff(&Matrix::identity(3)) < 1e-13);
        assert!(vtv.max_abs_diff(&Matrix::identity(3)) < 1e-13);
    }

    #[test]
    fn determinant_and_inverse() {
        let a = Matrix::from_rows(&[&[4.0, 7.0], &[2.0, 6.0]]).unwrap();
        assert!((a.determinant() - 10.0).abs() < 1e-14);
        let inv = a.inverse().unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(2)) < 1e-14);
        let singular = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert_eq!(singular.determinant(), 0.0);
        assert!(singular.inverse().is_none());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn qr_reconstructs_and_is_orthonormal() {
        let a = Matrix::new(4, 2, vec![1.0, 2.0, -3.0, 0.5, 0.0, 4.0, 2.0, -1.0]).unwrap();
        let (q, r) = qr_thin(&a);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-14);
        assert!(q.transpose().matmul(&q).max_abs_diff(&Matrix::identity(2)) < 1e-15);
        assert_eq!(r[(1, 0)], 0.0);
        let ri = upper_triangular_inverse(&r).unwrap();
        assert!(r.matmul(&ri).max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }
}
