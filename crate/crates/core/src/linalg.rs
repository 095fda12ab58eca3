//! Dense linear algebra for the stiffness and compliance matrices.
//!
//! Everything here is small (the testbed has at most a dozen joints), so the
//! routines favour clarity over blocking: row-major storage, Cholesky with a
//! pivot guard, power iteration for extreme eigen/singular values and a
//! one-sided Jacobi SVD behind the pseudo-inverse.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pivots at or below this value reject a Cholesky factorization.
pub const PIVOT_EPS: f64 = 1e-12;

/// Default singular-value cutoff (relative to the largest) for [`pinv`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} <= {PIVOT_EPS:e})")]
    NotPositiveDefinite { pivot: usize },
    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NotConverged { iterations: usize, estimate: f64 },
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("data length {got} does not match {rows}x{cols}")]
    InvalidData { rows: usize, cols: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
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
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Copies the contiguous column range `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column range out of bounds");
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.data[i * width..(i + 1) * width]
                .copy_from_slice(&self.data[i * self.cols + start..i * self.cols + end]);
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v` without materializing the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Maximum absolute row sum, an upper bound on every eigenvalue magnitude.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|a| a.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetric_part(&self) -> Matrix {
        assert!(self.is_square(), "symmetric part of a non-square matrix");
        let t = self.transpose();
        self.zip_with(&t, |a, b| 0.5 * (a + b))
    }

    /// `(M − Mᵀ)/2`.
    pub fn antisymmetric_part(&self) -> Matrix {
        assert!(self.is_square(), "antisymmetric part of a non-square matrix");
        let t = self.transpose();
        self.zip_with(&t, |a, b| 0.5 * (a - b))
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Symmetric matrix. Construction symmetrizes its input as `(M + Mᵀ)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: (m.rows, m.rows),
                got: m.shape(),
            });
        }
        Ok(Self(m.symmetric_part()))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.0.quad_form(v)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(self.0.scale(s))
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.add(&other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(self.0.sub(&other.0))
    }

    /// Inverse of an SPD matrix through its Cholesky factor.
    pub fn spd_inverse(&self) -> Result<SymMatrix> {
        let chol = cholesky(self)?;
        let inv = chol.solve(&Matrix::identity(self.dim()));
        SymMatrix::new(inv)
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.0[(i, j)] == 0.0))
    }
}

impl TryFrom<Matrix> for SymMatrix {
    type Error = LinalgError;

    fn try_from(m: Matrix) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for Matrix {
    fn from(s: SymMatrix) -> Matrix {
        s.0
    }
}

/// Lower-triangular Cholesky factor `L` with `M = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn reconstruct(&self) -> Matrix {
        self.l.matmul(&self.l.transpose())
    }

    /// Solves `L·X = B` by forward substitution.
    pub fn solve_lower(&self, b: &Matrix) -> Matrix {
        solve_lower_triangular(&self.l, b)
    }

    /// Solves `Lᵀ·X = B` by back substitution.
    pub fn solve_upper(&self, b: &Matrix) -> Matrix {
        let n = self.l.rows;
        assert_eq!(b.rows, n, "solve_upper shape mismatch");
        let mut x = b.clone();
        for c in 0..b.cols {
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = s / self.l[(i, i)];
            }
        }
        x
    }

    /// Solves `M·X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.solve_upper(&self.solve_lower(b))
    }
}

/// Forward substitution against a lower-triangular `l`.
pub fn solve_lower_triangular(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    assert_eq!(b.rows, n, "solve_lower shape mismatch");
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Cholesky factorization `M = L·Lᵀ`; fails on the first pivot `<= PIVOT_EPS`.
pub fn cholesky(m: &SymMatrix) -> Result<Cholesky> {
    let n = m.dim();
    let a = m.matrix();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_EPS) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(Cholesky { l })
}

/// Largest singular value with its unit singular vectors, `A·v = σ·u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularPair {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Largest eigenvalue of a symmetric matrix with a unit eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Fixed pseudo-random unit start vector so repeated runs agree bit for bit.
fn start_vector(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            // splitmix64
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    normalize(&mut v);
    v
}

/// Power iteration on `AᵀA` for the top singular triplet.
///
/// Stops once the residual bound on `σ` drops below `tol·max(1, σ)`.
pub fn top_singular_pair(a: &Matrix, max_iters: usize, tol: f64) -> Result<SingularPair> {
    let (pair, converged) = top_singular_pair_relaxed(a, max_iters, tol);
    if converged {
        Ok(pair)
    } else {
        Err(LinalgError::NotConverged {
            iterations: max_iters,
            estimate: pair.sigma,
        })
    }
}

/// Like [`top_singular_pair`] but always returns the last iterate, flagged
/// with whether the stopping rule was met.
pub fn top_singular_pair_relaxed(a: &Matrix, max_iters: usize, tol: f64) -> (SingularPair, bool) {
    assert!(max_iters >= 1 && tol > 0.0);
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        let pair = SingularPair {
            sigma: 0.0,
            u: vec![0.0; m],
            v: vec![0.0; n],
        };
        return (pair, true);
    }
    let mut v = start_vector(n);
    let mut w = a.matvec(&v);
    let mut sigma = norm(&w);
    let mut converged = false;
    for _ in 0..max_iters {
        let rho = sigma * sigma;
        let z = a.tr_matvec(&w);
        let resid = z
            .iter()
            .zip(&v)
            .map(|(zi, vi)| (zi - rho * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = if sigma > 0.0 {
            (resid / sigma).min(resid.sqrt())
        } else {
            resid.sqrt()
        };
        if bound <= tol * sigma.max(1.0) {
            converged = true;
            break;
        }
        let zn = norm(&z);
        if zn == 0.0 {
            // v sits in the null space of A, so σ = 0 along it.
            converged = true;
            break;
        }
        v = z.into_iter().map(|x| x / zn).collect();
        w = a.matvec(&v);
        sigma = norm(&w);
    }
    let u = if sigma > 0.0 {
        w.iter().map(|x| x / sigma).collect()
    } else {
        let mut e = vec![0.0; m];
        e[0] = 1.0;
        e
    };
    (SingularPair { sigma, u, v }, converged)
}

/// Largest singular value `‖A‖₂` by power iteration.
pub fn spectral_norm(a: &Matrix, max_iters: usize, tol: f64) -> Result<f64> {
    top_singular_pair(a, max_iters, tol).map(|p| p.sigma)
}

/// Largest eigenvalue (and eigenvector) of a symmetric matrix.
///
/// Shifts by `‖S‖_∞` so the target eigenvalue is dominant and the iterated
/// operator is positive semidefinite.
pub fn max_eig_pair(s: &SymMatrix, max_iters: usize, tol: f64) -> Result<EigenPair> {
    let (pair, converged) = max_eig_pair_relaxed(s, max_iters, tol);
    if converged {
        Ok(pair)
    } else {
        Err(LinalgError::NotConverged {
            iterations: max_iters,
            estimate: pair.value,
        })
    }
}

/// Like [`max_eig_pair`] but always returns the last iterate.
pub fn max_eig_pair_relaxed(s: &SymMatrix, max_iters: usize, tol: f64) -> (EigenPair, bool) {
    assert!(max_iters >= 1 && tol > 0.0);
    let m = s.matrix();
    let n = s.dim();
    let shift = m.inf_norm();
    if shift == 0.0 {
        let mut vector = vec![0.0; n];
        if n > 0 {
            vector[0] = 1.0;
        }
        return (EigenPair { value: 0.0, vector }, true);
    }
    let mut v = start_vector(n);
    let mut value = 0.0;
    for _ in 0..max_iters {
        let sv = m.matvec(&v);
        value = dot(&v, &sv);
        let resid = sv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - value * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= tol * shift.max(1.0) {
            return (EigenPair { value, vector: v }, true);
        }
        let mut next: Vec<f64> = sv.iter().zip(&v).map(|(a, b)| a + shift * b).collect();
        normalize(&mut next);
        v = next;
    }
    (EigenPair { value, vector: v }, false)
}

/// Largest eigenvalue of a symmetric matrix (may be negative).
pub fn max_eig_sym(s: &SymMatrix, max_iters: usize, tol: f64) -> Result<f64> {
    max_eig_pair(s, max_iters, tol).map(|p| p.value)
}

/// Smallest eigenvalue, as `−λ_max(−S)`.
pub fn min_eig_sym(s: &SymMatrix, max_iters: usize, tol: f64) -> Result<f64> {
    max_eig_sym(&s.scale(-1.0), max_iters, tol).map(|v| -v)
}

/// `A ⪯ B` within `tol`, i.e. `λ_min(B − A) ≥ −tol`.
pub fn psd_leq(a: &SymMatrix, b: &SymMatrix, tol: f64) -> bool {
    assert_eq!(a.dim(), b.dim(), "psd_leq dimension mismatch");
    let diff = b.sub(a);
    let lambda = match min_eig_sym(&diff, 100_000, 1e-14) {
        Ok(v) => v,
        Err(LinalgError::NotConverged { estimate, .. }) => estimate,
        Err(e) => unreachable!("min_eig_sym: {e}"),
    };
    lambda >= -tol
}

/// One-sided Jacobi SVD of a tall matrix (`rows >= cols`).
///
/// Returns `(W, V)` with `A·V = W`; the columns of `W` are mutually orthogonal
/// and their norms are the singular values.
fn one_sided_jacobi(a: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = a.shape();
    debug_assert!(rows >= cols);
    let mut w = a.clone();
    let mut v = Matrix::identity(cols);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (wp, wq) = (w[(i, p)], w[(i, q)]);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (wp, wq) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..cols {
                    let (vp, vq) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Moore–Penrose pseudo-inverse; singular values below `rank_tol·σ_max` are dropped.
pub fn pinv(j: &Matrix, rank_tol: f64) -> Matrix {
    assert!(rank_tol > 0.0);
    let wide = j.rows < j.cols;
    let a = if wide { j.transpose() } else { j.clone() };
    let (w, v) = one_sided_jacobi(&a);
    let k = a.cols;
    let sigmas: Vec<f64> = (0..k).map(|c| norm(&w.column(c))).collect();
    let smax = sigmas.iter().cloned().fold(0.0, f64::max);
    // A♯ = Σ σ⁻² v_c w_cᵀ over retained columns.
    let mut a_pinv = Matrix::zeros(a.cols, a.rows);
    for (c, &s) in sigmas.iter().enumerate() {
        if smax == 0.0 || s <= rank_tol * smax {
            continue;
        }
        let inv2 = 1.0 / (s * s);
        for r in 0..a.cols {
            let vr = v[(r, c)] * inv2;
            for i in 0..a.rows {
                a_pinv[(r, i)] += vr * w[(i, c)];
            }
        }
    }
    if wide {
        a_pinv.transpose()
    } else {
        a_pinv
    }
}

/// Smallest singular value (used as a rank check on task Jacobians).
pub fn min_singular_value(j: &Matrix) -> f64 {
    let a = if j.rows < j.cols { j.transpose() } else { j.clone() };
    let (w, _) = one_sided_jacobi(&a);
    (0..a.cols)
        .map(|c| norm(&w.column(c)))
        .fold(f64::INFINITY, f64::min)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetrizes_on_construction() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [4.0, 3.0]]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 3.0);
        assert_eq!(s.matrix()[(1, 0)], 3.0);
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let l = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(l.factor(), &Matrix::identity(3));
        let l = cholesky(&SymMatrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l.factor(), &Matrix::from_diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = SymMatrix::new(Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).unwrap();
        assert_eq!(
            cholesky(&s).unwrap_err(),
            LinalgError::NotPositiveDefinite { pivot: 1 }
        );
        let z = SymMatrix::from_diag(&[0.0, 1.0]);
        assert_eq!(
            cholesky(&z).unwrap_err(),
            LinalgError::NotPositiveDefinite { pivot: 0 }
        );
    }

    #[test]
    fn triangular_solves_invert() {
        let s = SymMatrix::new(Matrix::from_rows(&[
            [4.0, 1.0, 0.5],
            [1.0, 3.0, 0.2],
            [0.5, 0.2, 2.0],
        ]))
        .unwrap();
        let c = cholesky(&s).unwrap();
        let x = c.solve(&Matrix::identity(3));
        let prod = s.matrix().matmul(&x);
        assert!(prod.sub(&Matrix::identity(3)).max_abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_simple_cases() {
        let d = Matrix::from_diag(&[3.0, 1.0]);
        assert!(close(spectral_norm(&d, 1000, 1e-12).unwrap(), 3.0, 1e-10));
        assert_eq!(spectral_norm(&Matrix::zeros(4, 6), 10, 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn singular_pair_satisfies_av_eq_sigma_u() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.5, -1.0, 3.0]]);
        let p = top_singular_pair(&a, 10_000, 1e-13).unwrap();
        let av = a.matvec(&p.v);
        for (x, u) in av.iter().zip(&p.u) {
            assert!(close(*x, p.sigma * u, 1e-8));
        }
    }

    #[test]
    fn not_converged_reports_estimate() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.999]]);
        match top_singular_pair(&a, 1, 1e-15) {
            Err(LinalgError::NotConverged {
                iterations,
                estimate,
            }) => {
                assert_eq!(iterations, 1);
                assert!(estimate > 0.9);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn max_eig_examples() {
        let d = SymMatrix::from_diag(&[-1.0, -5.0]);
        assert!(close(max_eig_sym(&d, 10_000, 1e-12).unwrap(), -1.0, 1e-8));
        let x = SymMatrix::new(Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert!(close(max_eig_sym(&x, 10_000, 1e-12).unwrap(), 1.0, 1e-8));
    }

    #[test]
    fn pinv_examples() {
        let i3 = pinv(&Matrix::identity(3), DEFAULT_RANK_TOL);
        assert!(i3.sub(&Matrix::identity(3)).max_abs() < 1e-14);
        let p = pinv(&Matrix::row_vector(&[3.0, 4.0]), DEFAULT_RANK_TOL);
        assert_eq!(p.shape(), (2, 1));
        assert!(close(p[(0, 0)], 3.0 / 25.0, 1e-14));
        assert!(close(p[(1, 0)], 4.0 / 25.0, 1e-14));
    }

    #[test]
    fn pinv_truncates_rank_deficient() {
        let j = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        let p = pinv(&j, DEFAULT_RANK_TOL);
        // J·J♯·J = J on the retained rank-one range.
        let back = j.matmul(&p).matmul(&j);
        assert!(back.sub(&j).max_abs() < 1e-10);
        assert!(p.is_finite());
    }

    #[test]
    fn psd_ordering_examples() {
        let i = SymMatrix::identity(2);
        let two_i = i.scale(2.0);
        assert!(psd_leq(&i, &two_i, 1e-9));
        assert!(!psd_leq(&two_i, &i, 1e-9));
        assert!(!psd_leq(
            &SymMatrix::from_diag(&[1.0, 3.0]),
            &SymMatrix::from_diag(&[2.0, 2.0]),
            1e-9
        ));
    }

    #[test]
    fn start_vector_is_deterministic_unit() {
        let a = start_vector(7);
        let b = start_vector(7);
        assert_eq!(a, b);
        assert!(close(norm(&a), 1.0, 1e-15));
    }

    #[test]
    fn serde_symmetrizes() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [2.0, 1.0]]);
        let json = serde_json::to_string(&m).unwrap();
        let s: SymMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 1.0);
    }
}
