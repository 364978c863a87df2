//! Small dense linear algebra: just enough for 5x5 to 100x100 problems.
//!
//! Matrices are row-major `f64` buffers; vectors are plain `Vec<f64>` /
//! `&[f64]`. Nothing here tries to be fast beyond avoiding needless
//! allocation: the largest operand in this crate is the m = 100
//! Chandrasekhar matrix.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type DenseVector = Vec<f64>;

/// Relative tolerance for the power iteration in [`spectral_norm`].
pub const SPECTRAL_TOL: f64 = 1e-12;
/// Iteration cap for the power iteration in [`spectral_norm`].
pub const SPECTRAL_MAX_ITER: usize = 10_000;
/// `AᵀA` is squared this many times before iterating.
pub const SPECTRAL_SQUARINGS: usize = 16;
/// `|R_kk| <= RANK_TOL * max|R_ii|` is treated as rank deficiency.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("ragged columns".into()));
        }
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mat_mul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// `Aᵀ x` without materializing the transpose.
    pub fn mat_t_vec(&self, x: &[f64]) -> Result<DenseVector> {
        if self.rows != x.len() {
            return Err(Error::Dimension(format!(
                "transpose of {}x{} applied to length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension("matrix sum of different shapes".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.add(&other.scaled(-1.0))
    }

    /// Max-abs entry.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖QᵀQ − I‖∞` measured entrywise.
    pub fn orthogonality_defect(&self) -> f64 {
        let qtq = self.transpose().mat_mul(self).expect("square by construction");
        qtq.sub(&DenseMatrix::identity(self.cols))
            .expect("same shape")
            .max_abs()
    }

    /// Zero-pads a square matrix into the top-left block of a `dim x dim` matrix.
    pub fn zero_padded(&self, dim: usize) -> Result<DenseMatrix> {
        if dim < self.rows || dim < self.cols {
            return Err(Error::Dimension(format!(
                "cannot pad {}x{} into {dim}x{dim}",
                self.rows, self.cols
            )));
        }
        let mut out = Self::zeros(dim, dim);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self[(i, j)];
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.entries[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.entries[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> DenseVector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> DenseVector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(alpha: f64, a: &[f64]) -> DenseVector {
    a.iter().map(|x| alpha * x).collect()
}

pub fn mat_vec(a: &DenseMatrix, x: &[f64]) -> Result<DenseVector> {
    if a.cols != x.len() {
        return Err(Error::Dimension(format!(
            "{}x{} matrix applied to length {}",
            a.rows,
            a.cols,
            x.len()
        )));
    }
    Ok((0..a.rows).map(|i| dot(a.row(i), x)).collect())
}

/// Thin Householder QR of an `m x n` matrix with `m >= n`.
///
/// Returns `Q` (`m x n`, orthonormal columns) and `R` (`n x n`, upper
/// triangular with a nonnegative diagonal). A zero column leaves a zero on
/// the diagonal of `R` instead of failing.
pub fn householder_qr(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(Error::Dimension(format!("QR needs rows >= cols, got {m}x{n}")));
    }
    let mut work = a.clone();
    let mut reflectors: Vec<Option<DenseVector>> = Vec::with_capacity(n);

    for k in 0..n {
        let x: DenseVector = (k..m).map(|i| work[(i, k)]).collect();
        let norm_x = norm2(&x);
        if norm_x == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm_x } else { norm_x };
        let mut v = x;
        v[0] -= alpha;
        let norm_v = norm2(&v);
        if norm_v == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|vi| *vi /= norm_v);
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * work[(i, j)]).sum();
            for i in k..m {
                work[(i, j)] -= 2.0 * s * v[i - k];
            }
        }
        reflectors.push(Some(v));
    }

    let mut r = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = work[(i, j)];
        }
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = DenseMatrix::zeros(m, n);
    for j in 0..n {
        q[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        if let Some(v) = &reflectors[k] {
            for j in 0..n {
                let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
                for i in k..m {
                    q[(i, j)] -= 2.0 * s * v[i - k];
                }
            }
        }
    }

    // Canonical signs: diag(R) >= 0.
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for j in k..n {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..m {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    Ok((q, r))
}

/// Solves `R y = c` for upper-triangular `R`.
pub fn back_substitute(r: &DenseMatrix, c: &[f64]) -> Result<DenseVector> {
    let n = r.cols;
    if r.rows < n || c.len() < n {
        return Err(Error::Dimension("back substitution shape".into()));
    }
    let scale = (0..n).fold(0.0_f64, |m, i| m.max(r[(i, i)].abs()));
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let d = r[(i, i)];
        if d.abs() <= RANK_TOL * scale || d == 0.0 {
            return Err(Error::RankDeficient { index: i, value: d });
        }
        let s: f64 = ((i + 1)..n).map(|j| r[(i, j)] * y[j]).sum();
        y[i] = (c[i] - s) / d;
    }
    Ok(y)
}

/// `argmin_y ‖A y − b‖₂` via Householder QR.
pub fn least_squares(a: &DenseMatrix, b: &[f64]) -> Result<DenseVector> {
    if a.rows != b.len() {
        return Err(Error::Dimension(format!(
            "least squares with {}x{} matrix and length-{} rhs",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let (q, r) = householder_qr(a)?;
    let qtb = q.mat_t_vec(b)?;
    back_substitute(&r, &qtb)
}

/// Direct solve of a square system.
pub fn solve(a: &DenseMatrix, b: &[f64]) -> Result<DenseVector> {
    if !a.is_square() {
        return Err(Error::Dimension("solve needs a square matrix".into()));
    }
    least_squares(a, b)
}

/// Lower-triangular Cholesky factor; `None` if the matrix is not positive
/// definite.
pub fn cholesky(a: &DenseMatrix) -> Option<DenseMatrix> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        l[(j, j)] = d.sqrt();
        for i in (j + 1)..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / l[(j, j)];
        }
    }
    Some(l)
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// The iteration runs on `(AᵀA)^(2^16)` (built by repeated squaring with
/// rescaling) so a nearly repeated top singular value does not stall it;
/// the convergence test and the returned value use the Rayleigh quotient of
/// `AᵀA` itself.
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    if a.entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectral_norm input".into()));
    }
    let n = a.cols;
    if n == 0 || a.rows == 0 {
        return Ok(0.0);
    }
    let ata = a.transpose().mat_mul(a)?;
    let mut power = ata.clone();
    for _ in 0..SPECTRAL_SQUARINGS {
        let s = power.max_abs();
        if s == 0.0 {
            return Ok(0.0);
        }
        let scaled = power.scaled(1.0 / s);
        power = scaled.mat_mul(&scaled)?;
    }
    // Deterministic start with no special alignment to coordinate axes.
    let mut v: DenseVector = (0..n).map(|i| 1.0 + 0.37 * (i as f64 + 1.0).sin()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut lambda = dot(&v, &mat_vec(&ata, &v)?);
    for _ in 0..SPECTRAL_MAX_ITER {
        let w = mat_vec(&power, &v)?;
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(lambda.max(0.0).sqrt());
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let next = dot(&v, &mat_vec(&ata, &v)?);
        if (next - lambda).abs() <= SPECTRAL_TOL * next.abs() {
            return Ok(norm2(&mat_vec(a, &v)?));
        }
        lambda = next;
    }
    Err(Error::NoConvergence {
        iterations: SPECTRAL_MAX_ITER,
    })
}

/// Haar-distributed orthogonal matrix: QR of a standard Gaussian matrix
/// with the sign of each column fixed by `diag(R) > 0`.
pub fn haar_orthogonal(dim: usize, seed: u64) -> Result<DenseMatrix> {
    if dim == 0 {
        return Err(Error::Invalid("haar_orthogonal needs dim >= 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let entries: Vec<f64> = (0..dim * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let g = DenseMatrix::from_row_major(dim, dim, entries)?;
    let (q, _) = householder_qr(&g)?;
    Ok(q)
}
