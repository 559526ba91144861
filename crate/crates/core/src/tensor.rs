//! Dense row-major `f64` matrices and the handful of primitives the solvers
//! need: products, least squares, soft-thresholding and relative error.
//!
//! Everything here is a pure function of its inputs. Weights are stored as
//! `f32` in graphs; they are widened to `f64` before reaching this module.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("rank-deficient design: numerical rank {rank} of {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
    #[error("least squares needs at least one row and one column")]
    Empty,
    #[error("reference matrix has zero norm")]
    ZeroReference,
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        if self.rows > 6 {
            write!(f, "\n  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Convenience constructor for literals in tests and examples.
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other, "sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other, "add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.cols {
        return Err(TensorError::DimensionMismatch {
            op: "matmul_nt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j))))
}

/// `aᵀ · b`, without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.rows != b.rows {
        return Err(TensorError::DimensionMismatch {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `min ‖a·x − b‖_F` for a full-column-rank `a` using Householder QR
/// with column pivoting.
///
/// A pivot whose magnitude falls below `max(N, p)·ε·|R₀₀|` marks the design
/// as rank deficient; the error carries the rank detected up to that point.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    let (x, rank) = lstsq_basic(a, b)?;
    if rank < a.cols {
        return Err(TensorError::RankDeficient { rank, cols: a.cols });
    }
    Ok(x)
}

/// Basic least-squares solution for possibly rank-deficient `a`.
///
/// Pivoted QR stops at the detected rank `r`; the `r` leading pivot columns
/// get a least-squares fit and every other coefficient is zero. Returns the
/// solution and `r`.
pub fn lstsq_basic(a: &Matrix, b: &Matrix) -> Result<(Matrix, usize), TensorError> {
    let (n, p) = a.shape();
    let q = b.cols;
    if n == 0 || p == 0 {
        return Err(TensorError::Empty);
    }
    if b.rows != n {
        return Err(TensorError::DimensionMismatch {
            op: "lstsq",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }

    // Column-major copy so Householder sweeps touch contiguous memory.
    let mut qr: Vec<Vec<f64>> = (0..p).map(|c| a.column(c)).collect();
    let mut rhs: Vec<Vec<f64>> = (0..q).map(|c| b.column(c)).collect();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut diag = vec![0.0; p];
    let eps = f64::EPSILON;
    let mut threshold = 0.0;

    let mut rank = p.min(n);
    for k in 0..p.min(n) {
        let (best, best_norm) = (k..p)
            .map(|j| (j, qr[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .fold((k, -1.0), |acc, (j, nrm)| if nrm > acc.1 { (j, nrm) } else { acc });
        qr.swap(k, best);
        perm.swap(k, best);
        let alpha_abs = best_norm.sqrt();
        if k == 0 {
            threshold = (n.max(p) as f64) * eps * alpha_abs;
        }
        if alpha_abs <= threshold || alpha_abs == 0.0 {
            rank = k;
            break;
        }

        let col = &mut qr[k];
        let alpha = if col[k] > 0.0 { -alpha_abs } else { alpha_abs };
        // v = x - alpha e1, stored in place of the column tail.
        col[k] -= alpha;
        let vnorm2: f64 = col[k..].iter().map(|v| v * v).sum();
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        let v: Vec<f64> = col[k..].to_vec();
        let reflect = |target: &mut [f64]| {
            let s = 2.0 * dot(&v, &target[k..]) / vnorm2;
            for (t, vi) in target[k..].iter_mut().zip(&v) {
                *t -= s * vi;
            }
        };
        for j in (k + 1)..p {
            reflect(&mut qr[j]);
        }
        for col in rhs.iter_mut() {
            reflect(col);
        }
    }

    // Back substitution on R (upper triangle of qr, diagonal in `diag`).
    let mut x = Matrix::zeros(p, q);
    for (c, col) in rhs.iter().enumerate() {
        let mut sol = vec![0.0; rank];
        for i in (0..rank).rev() {
            let mut acc = col[i];
            for j in (i + 1)..rank {
                acc -= qr[j][i] * sol[j];
            }
            sol[i] = acc / diag[i];
        }
        for (i, &pi) in perm.iter().take(rank).enumerate() {
            x[(pi, c)] = sol[i];
        }
    }
    Ok((x, rank))
}

/// Max-abs entry of `aᵀ(a·x − b)`: zero at an exact least-squares optimum.
pub fn normal_equation_residual(a: &Matrix, x: &Matrix, b: &Matrix) -> Result<f64, TensorError> {
    let resid = matmul(a, x)?.sub(b)?;
    Ok(matmul_tn(a, &resid)?.max_abs())
}

/// `sign(x)·max(|x| − t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `‖approx − reference‖_F / ‖reference‖_F`.
pub fn rel_error(approx: &Matrix, reference: &Matrix) -> Result<f64, TensorError> {
    let denom = reference.frobenius_norm();
    if denom == 0.0 {
        return Err(TensorError::ZeroReference);
    }
    Ok(approx.sub(reference)?.frobenius_norm() / denom)
}
