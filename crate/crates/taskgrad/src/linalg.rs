//! Dense row-major linear algebra and the matrix-exponential machinery.
//!
//! Everything in the crate stores numbers in [`DenseMatrix`] (row-major
//! `Vec<f64>`) or [`DenseVector`]; there are no other numeric containers.
//! Skew-symmetric generators of rotations live in [`SkewParam`], which holds
//! one free coefficient per coordinate pair. The exponential map [`expm`],
//! its Fréchet derivative [`expm_frechet`], and the parameter-space pullback
//! [`grad_through_exp`] connect skew parameters to rotation matrices and
//! their gradients.
//!
//! All functions are pure; concurrent callers are safe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this threshold are treated as exactly zero wherever a
/// division by a norm occurs. Chosen far above subnormal noise yet far below
/// any gradient magnitude a well-posed run produces.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Errors produced by the containers and solvers in this module.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinalgError {
    /// Shapes do not line up for the requested operation.
    #[error("{op}: dimension mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    /// A square matrix was required.
    #[error("{op}: matrix must be square, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    /// Raw data length does not match the requested shape.
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },
    /// Parameter count does not encode a skew matrix of the stated dimension.
    #[error("{len} coefficients do not encode a {dim}x{dim} skew matrix (expected {expected})")]
    BadSkewLength { len: usize, dim: usize, expected: usize },
    /// Linear system has no unique solution.
    #[error("singular system: no unique solution")]
    Singular,
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zeros matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { len: data.len(), rows, cols });
        }
        Ok(Self { rows, cols, data })
    }

    /// Build entry-wise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutably borrow row `i`.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The full row-major buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimMismatch {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * rhs.data[k * rhs.cols + j];
                }
                out.data[i * rhs.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Frobenius norm, `sqrt(sum of squared entries)`.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product `<self, rhs>` (sum of entry-wise products).
    pub fn frob_dot(&self, rhs: &DenseMatrix) -> Result<f64, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimMismatch {
                op: "frob_dot",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    /// `self += s · rhs`.
    pub fn add_scaled(&mut self, rhs: &DenseMatrix, s: f64) -> Result<(), LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimMismatch {
                op: "add_scaled",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Multiply every entry by `s`.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Determinant via LU decomposition with partial pivoting.
    pub fn det(&self) -> Result<f64, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { op: "det", rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut lu = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let mut pivot = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == 0.0 {
                return Ok(0.0);
            }
            if pivot != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot * n + j);
                }
                det = -det;
            }
            let diag = lu[col * n + col];
            det *= diag;
            for r in col + 1..n {
                let factor = lu[r * n + col] / diag;
                lu[r * n + col] = factor;
                for j in col + 1..n {
                    lu[r * n + j] -= factor * lu[col * n + j];
                }
            }
        }
        Ok(det)
    }

    /// Solve `self · x = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { op: "solve", rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        if b.len() != n {
            return Err(LinalgError::BadLength { len: b.len(), rows: n, cols: 1 });
        }
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[col * n + col].abs();
            for r in col + 1..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best < 1e-300 {
                return Err(LinalgError::Singular);
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                x.swap(col, pivot);
            }
            let diag = a[col * n + col];
            for r in col + 1..n {
                let factor = a[r * n + col] / diag;
                if factor != 0.0 {
                    for j in col..n {
                        a[r * n + j] -= factor * a[col * n + j];
                    }
                    x[r] -= factor * x[col];
                }
            }
        }
        for col in (0..n).rev() {
            let mut acc = x[col];
            for j in col + 1..n {
                acc -= a[col * n + j] * x[j];
            }
            let diag = a[col * n + col];
            if diag.abs() < 1e-300 {
                return Err(LinalgError::Singular);
            }
            x[col] = acc / diag;
        }
        Ok(x)
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Euclidean inner product.
    pub fn dot(&self, rhs: &DenseVector) -> Result<f64, LinalgError> {
        if self.len() != rhs.len() {
            return Err(LinalgError::BadLength { len: rhs.len(), rows: self.len(), cols: 1 });
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(a, b)| a * b).sum())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Free coefficients of a `dim × dim` skew-symmetric matrix, one per
/// coordinate pair `(i, j)` with `i < j`, enumerated row-major.
///
/// Coefficient `t` for pair `(i, j)` sets `A[j][i] = params[t]` and
/// `A[i][j] = -params[t]`, so for `dim = 2` a single coefficient `θ`
/// expands to `[[0, -θ], [θ, 0]]` and `expm` of that generator is the
/// counterclockwise planar rotation by `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewParam {
    dim: usize,
    params: Vec<f64>,
}

impl SkewParam {
    /// Number of free coefficients for a `dim × dim` skew matrix.
    pub fn param_count(dim: usize) -> usize {
        dim * (dim - 1) / 2
    }

    /// Zero generator (expands to the zero matrix; `expm` gives identity).
    pub fn zeros(dim: usize) -> Self {
        Self { dim, params: vec![0.0; Self::param_count(dim)] }
    }

    /// Wrap explicit coefficients.
    pub fn from_params(dim: usize, params: Vec<f64>) -> Result<Self, LinalgError> {
        let expected = Self::param_count(dim);
        if params.len() != expected {
            return Err(LinalgError::BadSkewLength { len: params.len(), dim, expected });
        }
        Ok(Self { dim, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The coordinate pair `(i, j)`, `i < j`, owning coefficient `t`.
    pub fn pair(&self, t: usize) -> (usize, usize) {
        let mut idx = 0;
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                if idx == t {
                    return (i, j);
                }
                idx += 1;
            }
        }
        panic!("coefficient index {t} out of range for dim {}", self.dim);
    }
}

/// Expand skew coefficients into the full antisymmetric matrix.
///
/// For each pair `(i, j)` with `i < j`: `A[j][i] = p[t]`, `A[i][j] = -p[t]`.
pub fn skew_expand(p: &SkewParam) -> DenseMatrix {
    let d = p.dim;
    let mut a = DenseMatrix::zeros(d, d);
    let mut t = 0;
    for i in 0..d {
        for j in i + 1..d {
            let v = p.params[t];
            a.set(j, i, v);
            a.set(i, j, -v);
            t += 1;
        }
    }
    a
}

/// Degree of the truncated exponential series used by [`expm`].
const EXPM_SERIES_DEGREE: usize = 13;
/// After scaling, the argument's Frobenius norm is at most this value, which
/// keeps the degree-13 truncation error below f64 round-off.
const EXPM_SCALED_NORM: f64 = 0.5;

/// Matrix exponential by scaling-and-squaring with a degree-13 truncated
/// series.
///
/// The argument is halved until its Frobenius norm is at most 0.5, the
/// series `Σ_{k≤13} B^k / k!` is summed, and the result is squared once per
/// halving. For skew-symmetric input the result is a rotation (orthogonal,
/// determinant +1) up to round-off.
pub fn expm(a: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { op: "expm", rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let norm = a.frob_norm();
    let squarings = if norm <= EXPM_SCALED_NORM {
        0
    } else {
        (norm / EXPM_SCALED_NORM).log2().ceil() as u32
    };
    let mut scaled = a.clone();
    scaled.scale(0.5f64.powi(squarings as i32));

    let mut sum = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=EXPM_SERIES_DEGREE {
        term = term.matmul(&scaled)?;
        term.scale(1.0 / k as f64);
        sum.add_scaled(&term, 1.0)?;
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum)?;
    }
    Ok(sum)
}

/// Fréchet derivative of the matrix exponential at `a` in direction `e`,
/// computed via the block-matrix identity: the top-right block of
/// `expm([[a, e], [0, a]])`.
pub fn expm_frechet(a: &DenseMatrix, e: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { op: "expm_frechet", rows: a.rows(), cols: a.cols() });
    }
    if e.rows() != a.rows() || e.cols() != a.cols() {
        return Err(LinalgError::DimMismatch {
            op: "expm_frechet",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: e.rows(),
            right_cols: e.cols(),
        });
    }
    let n = a.rows();
    let mut block = DenseMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            block.set(i, j, a.get(i, j));
            block.set(i, n + j, e.get(i, j));
            block.set(n + i, n + j, a.get(i, j));
        }
    }
    let exp_block = expm(&block)?;
    Ok(DenseMatrix::from_fn(n, n, |i, j| exp_block.get(i, n + j)))
}

/// Pull an upstream gradient `dL/dR` at `R = expm(skew_expand(p))` back onto
/// the skew coefficients.
///
/// Uses the adjoint identity: the adjoint of `E ↦ Dexp(A)[E]` under the
/// Frobenius inner product is `G ↦ Dexp(Aᵀ)[G]`, so a single block
/// exponential yields `dL/dA`, which is then projected onto the
/// antisymmetric basis (`dL/dp_t = M[j][i] - M[i][j]` for pair `(i, j)`).
pub fn grad_through_exp(p: &SkewParam, dl_dr: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    let d = p.dim();
    if dl_dr.rows() != d || dl_dr.cols() != d {
        return Err(LinalgError::DimMismatch {
            op: "grad_through_exp",
            left_rows: d,
            left_cols: d,
            right_rows: dl_dr.rows(),
            right_cols: dl_dr.cols(),
        });
    }
    let a_t = skew_expand(p).transpose();
    let m = expm_frechet(&a_t, dl_dr)?;
    let mut grad = vec![0.0; p.params().len()];
    let mut t = 0;
    for i in 0..d {
        for j in i + 1..d {
            grad[t] = m.get(j, i) - m.get(i, j);
            t += 1;
        }
    }
    Ok(grad)
}
