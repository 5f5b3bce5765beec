//! Per-task rotations of the shared feature and the alignment loss that
//! trains them.
//!
//! Each task `k` owns a skew parametrization of a rotation `R_k` in SO(m),
//! with `m` at most the feature width `d`. Applying the set to a feature
//! batch rotates the first `m` coordinates of every row and passes the
//! trailing `d - m` coordinates through bit-exactly. Rotation matrices are
//! cached and recomputed lazily, only for tasks whose parameters changed.
//!
//! The alignment loss for task `k` over a batch is
//! `L_k = -Σ_n <R_kᵀ g̃_n, v_n>`, where `g̃_n` is the task's (detached)
//! rotated-space gradient row and `v_n` the target direction row; its
//! gradient with respect to `R_k` is the negative outer-product sum
//! `-Σ_n g̃_n v_nᵀ`, pulled back onto the skew coefficients through the
//! exponential map.

use thiserror::Error;

use crate::linalg::{self, DenseMatrix, LinalgError, SkewParam};

/// Errors produced by the rotation layer.
#[derive(Debug, Error)]
pub enum RotationError {
    #[error("rotation subspace must have dimension >= 2, got {m}")]
    SubspaceTooSmall { m: usize },
    #[error("task index {k} out of range for {tasks} tasks")]
    TaskIndex { k: usize, tasks: usize },
    #[error("batch has width {got}, need at least the rotated width {m}")]
    FeatureWidth { m: usize, got: usize },
    #[error("{what} is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    ShapeMismatch { what: &'static str, rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("target needs at least one unit-gradient matrix")]
    EmptyTarget,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Mean of the per-task unit gradients, row for row: the common direction
/// every rotation is steered toward. Rows have norm at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    mean: DenseMatrix,
}

impl TargetVector {
    pub fn as_matrix(&self) -> &DenseMatrix {
        &self.mean
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn cols(&self) -> usize {
        self.mean.cols()
    }
}

/// Row-wise mean of `K` equally-shaped unit-gradient matrices.
pub fn make_target(unit_grads: &[&DenseMatrix]) -> Result<TargetVector, RotationError> {
    let first = unit_grads.first().ok_or(RotationError::EmptyTarget)?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut mean = DenseMatrix::zeros(rows, cols);
    for g in unit_grads {
        if g.rows() != rows || g.cols() != cols {
            return Err(RotationError::ShapeMismatch {
                what: "unit gradient",
                rows,
                cols,
                got_rows: g.rows(),
                got_cols: g.cols(),
            });
        }
        mean.add_scaled(g, 1.0)?;
    }
    mean.scale(1.0 / unit_grads.len() as f64);
    Ok(TargetVector { mean })
}

/// One rotation per task, all acting on the leading `m` feature coordinates.
#[derive(Debug, Clone)]
pub struct RotationSet {
    subspace: usize,
    skews: Vec<SkewParam>,
    cache: Vec<DenseMatrix>,
    dirty: Vec<bool>,
    recomputes: u64,
}

impl RotationSet {
    /// `num_tasks` identity rotations on an `m`-dimensional subspace.
    pub fn identity(num_tasks: usize, m: usize) -> Result<Self, RotationError> {
        if m < 2 {
            return Err(RotationError::SubspaceTooSmall { m });
        }
        Ok(Self {
            subspace: m,
            skews: vec![SkewParam::zeros(m); num_tasks],
            cache: vec![DenseMatrix::identity(m); num_tasks],
            dirty: vec![false; num_tasks],
            recomputes: 0,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.skews.len()
    }

    pub fn subspace(&self) -> usize {
        self.subspace
    }

    pub fn skew(&self, k: usize) -> Result<&SkewParam, RotationError> {
        self.skews.get(k).ok_or(RotationError::TaskIndex { k, tasks: self.skews.len() })
    }

    /// Replace task `k`'s generator wholesale (used when restoring
    /// snapshots). Marks the cached matrix stale.
    pub fn set_skew(&mut self, k: usize, skew: SkewParam) -> Result<(), RotationError> {
        if k >= self.skews.len() {
            return Err(RotationError::TaskIndex { k, tasks: self.skews.len() });
        }
        if skew.dim() != self.subspace {
            return Err(RotationError::ShapeMismatch {
                what: "skew generator",
                rows: self.subspace,
                cols: self.subspace,
                got_rows: skew.dim(),
                got_cols: skew.dim(),
            });
        }
        self.skews[k] = skew;
        self.dirty[k] = true;
        Ok(())
    }

    /// Mutate task `k`'s skew coefficients in place (optimizer step) and
    /// mark the cached matrix stale.
    pub fn update_skew(&mut self, k: usize, f: impl FnOnce(&mut [f64])) -> Result<(), RotationError> {
        if k >= self.skews.len() {
            return Err(RotationError::TaskIndex { k, tasks: self.skews.len() });
        }
        f(self.skews[k].params_mut());
        self.dirty[k] = true;
        Ok(())
    }

    /// How many matrix exponentials the cache has evaluated so far. Purely
    /// diagnostic; lets tests confirm refreshes happen only after updates.
    pub fn recomputes(&self) -> u64 {
        self.recomputes
    }

    /// Current rotation matrix for task `k`, recomputing it only if the
    /// generator changed since the last call.
    pub fn rotation(&mut self, k: usize) -> Result<&DenseMatrix, RotationError> {
        if k >= self.skews.len() {
            return Err(RotationError::TaskIndex { k, tasks: self.skews.len() });
        }
        if self.dirty[k] {
            self.cache[k] = linalg::expm(&linalg::skew_expand(&self.skews[k]))?;
            self.dirty[k] = false;
            self.recomputes += 1;
        }
        Ok(&self.cache[k])
    }

    /// Rotate the first `m` coordinates of every row of `z` with `R_k`; the
    /// trailing coordinates are copied through bit-exactly.
    pub fn apply(&mut self, z: &DenseMatrix, k: usize) -> Result<DenseMatrix, RotationError> {
        let m = self.subspace;
        if z.cols() < m {
            return Err(RotationError::FeatureWidth { m, got: z.cols() });
        }
        let r = self.rotation(k)?.clone();
        let mut out = z.clone();
        for n in 0..z.rows() {
            let src = z.row(n);
            let dst = out.row_mut(n);
            for a in 0..m {
                let mut acc = 0.0;
                for b in 0..m {
                    acc += r.get(a, b) * src[b];
                }
                dst[a] = acc;
            }
        }
        Ok(out)
    }

    /// Map an upstream gradient from rotated space back to shared-feature
    /// space: first `m` coordinates through `R_kᵀ`, the rest copied.
    pub fn pull_back(&mut self, g_tilde: &DenseMatrix, k: usize) -> Result<DenseMatrix, RotationError> {
        let m = self.subspace;
        if g_tilde.cols() < m {
            return Err(RotationError::FeatureWidth { m, got: g_tilde.cols() });
        }
        let r = self.rotation(k)?.clone();
        let mut out = g_tilde.clone();
        for n in 0..g_tilde.rows() {
            let src = g_tilde.row(n);
            let dst = out.row_mut(n);
            for a in 0..m {
                let mut acc = 0.0;
                for b in 0..m {
                    // R^T[a][b] = R[b][a]
                    acc += r.get(b, a) * src[b];
                }
                dst[a] = acc;
            }
        }
        Ok(out)
    }

    /// Alignment loss `-Σ_n <R_kᵀ g̃_n, v_n>` for task `k`. Both `g_tilde`
    /// and the target must be `B × m`.
    pub fn rotation_loss(&mut self, k: usize, g_tilde: &DenseMatrix, v: &TargetVector) -> Result<f64, RotationError> {
        let m = self.subspace;
        check_block(g_tilde, "rotated gradient", m)?;
        if v.rows() != g_tilde.rows() || v.cols() != m {
            return Err(RotationError::ShapeMismatch {
                what: "target",
                rows: g_tilde.rows(),
                cols: m,
                got_rows: v.rows(),
                got_cols: v.cols(),
            });
        }
        let r = self.rotation(k)?.clone();
        let mut loss = 0.0;
        for n in 0..g_tilde.rows() {
            let g = g_tilde.row(n);
            let t = v.as_matrix().row(n);
            // <R^T g, v> = g^T (R v)
            for a in 0..m {
                let mut rv = 0.0;
                for b in 0..m {
                    rv += r.get(a, b) * t[b];
                }
                loss -= g[a] * rv;
            }
        }
        Ok(loss)
    }

    /// Gradient of the alignment loss with respect to task `k`'s skew
    /// coefficients: upstream `dL/dR = -Σ_n g̃_n v_nᵀ`, pulled back through
    /// the exponential map. `g̃` is treated as a constant.
    pub fn rotation_loss_grad(
        &self,
        k: usize,
        g_tilde: &DenseMatrix,
        v: &TargetVector,
    ) -> Result<Vec<f64>, RotationError> {
        let m = self.subspace;
        check_block(g_tilde, "rotated gradient", m)?;
        if v.rows() != g_tilde.rows() || v.cols() != m {
            return Err(RotationError::ShapeMismatch {
                what: "target",
                rows: g_tilde.rows(),
                cols: m,
                got_rows: v.rows(),
                got_cols: v.cols(),
            });
        }
        let skew = self.skew(k)?;
        let mut dl_dr = DenseMatrix::zeros(m, m);
        for n in 0..g_tilde.rows() {
            let g = g_tilde.row(n);
            let t = v.as_matrix().row(n);
            for a in 0..m {
                for b in 0..m {
                    let v = dl_dr.get(a, b) - g[a] * t[b];
                    dl_dr.set(a, b, v);
                }
            }
        }
        Ok(linalg::grad_through_exp(skew, &dl_dr)?)
    }
}

fn check_block(m: &DenseMatrix, what: &'static str, width: usize) -> Result<(), RotationError> {
    if m.cols() != width {
        return Err(RotationError::ShapeMismatch {
            what,
            rows: m.rows(),
            cols: width,
            got_rows: m.rows(),
            got_cols: m.cols(),
        });
    }
    Ok(())
}
