//! Strategies that merge per-task feature gradients into one backbone
//! update.
//!
//! Every combiner consumes `K` equally-shaped `B × d` gradient matrices
//! (one per task, rows are per-sample contributions) and produces a single
//! combined matrix plus the per-task multipliers it applied. Inner products
//! and norms between batch gradients are Frobenius throughout, i.e. batches
//! are treated as flattened `B·d` vectors.
//!
//! Available strategies:
//!
//! * [`vanilla`] — plain sum.
//! * [`scale_only`] — magnitude equalization: every task is rescaled so its
//!   contribution has the common magnitude `C = Σ_k α_k ‖G_k‖`, with the
//!   convergence-rate simplex `α_k ∝ ‖G_k‖ / ‖G_k⁰‖`.
//! * [`pcgrad`] — gradient surgery: project each task's gradient away from
//!   the tasks it conflicts with, in random order.
//! * [`graddrop`] — per-coordinate sign lottery driven by the sign purity.
//! * [`gradnorm`] — one online gradient step on task weights toward
//!   norm-balancing targets.
//! * [`mgda_ub`] — Frank–Wolfe min-norm point of the gradients' convex hull.
//! * [`imtl_g`] — closed-form weights giving the combined gradient equal
//!   projections onto every task's unit gradient.
//!
//! [`prop1_certificate`] checks the sufficient descent condition: if every
//! pairwise cosine similarity exceeds `-1/(K-1)`, a small enough step along
//! the equal-magnitude combination decreases every task loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{DenseMatrix, LinalgError, ZERO_NORM_EPS};

/// Errors produced by the combiners.
#[derive(Debug, Error)]
pub enum CombineError {
    #[error("need at least one task gradient")]
    Empty,
    #[error("task {k} gradient is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    ShapeMismatch { k: usize, rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("got {got} losses for {expected} tasks")]
    LossCount { expected: usize, got: usize },
    #[error("got {got} weights for {expected} tasks")]
    WeightCount { expected: usize, got: usize },
    #[error("got {got} initial norms for {expected} tasks")]
    NormCount { expected: usize, got: usize },
    #[error("invalid combiner parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Which combination strategy a run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CombinerKind {
    /// Plain sum of task gradients.
    Vanilla,
    /// Magnitude equalization to the common scale `C`.
    ScaleOnly,
    /// Projection surgery against conflicting tasks.
    PcGrad,
    /// Sign lottery; `leak` blends the dropped mass back in (0 = pure drop,
    /// 1 = vanilla).
    GradDrop { leak: f64 },
    /// Online norm balancing; `alpha` is the asymmetry exponent.
    GradNorm { alpha: f64 },
    /// Frank–Wolfe min-norm point over the task simplex.
    MgdaUb { max_iter: usize, tol: f64 },
    /// Equal-projection weights via a linear solve.
    ImtlG,
}

impl CombinerKind {
    /// Defaults for the iterative min-norm solver.
    pub fn mgda_ub_default() -> Self {
        CombinerKind::MgdaUb { max_iter: 250, tol: 1e-7 }
    }

    /// Check strategy parameters.
    pub fn validate(&self) -> Result<(), CombineError> {
        match *self {
            CombinerKind::GradDrop { leak } => {
                if !(0.0..=1.0).contains(&leak) {
                    return Err(CombineError::BadParam(format!("graddrop leak must be in [0, 1], got {leak}")));
                }
            }
            CombinerKind::GradNorm { alpha } => {
                if !alpha.is_finite() || alpha < 0.0 {
                    return Err(CombineError::BadParam(format!("gradnorm alpha must be >= 0, got {alpha}")));
                }
            }
            CombinerKind::MgdaUb { max_iter, tol } => {
                if max_iter == 0 {
                    return Err(CombineError::BadParam("mgda_ub max_iter must be >= 1".into()));
                }
                if !(tol > 0.0) {
                    return Err(CombineError::BadParam(format!("mgda_ub tol must be > 0, got {tol}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Side information about one combination.
#[derive(Debug, Clone, Default)]
pub struct CombineDiagnostics {
    /// Frobenius norm of each task gradient.
    pub task_norms: Vec<f64>,
    /// Pairwise batch cosines, pairs `(i, j)` with `i < j` in row-major
    /// order; pairs involving a zero gradient report 0.
    pub pairwise_cos: Vec<f64>,
    /// Cosine between each task gradient and the combined update.
    pub update_task_cos: Vec<f64>,
    /// Tasks whose gradient norm fell below the zero guard.
    pub zero_norm_tasks: Vec<usize>,
    /// The strategy could not run and fell back to the plain sum.
    pub fallback_vanilla: bool,
    /// Frank–Wolfe iterations spent (min-norm solver only).
    pub fw_iterations: Option<usize>,
    /// Whether the min-norm solver met its tolerance.
    pub fw_converged: Option<bool>,
    /// Human-readable notes about guards and fallbacks taken.
    pub notes: Vec<String>,
}

/// A combined update: the matrix to backpropagate, the per-task multipliers
/// that produced it, the common magnitude where one exists, and the
/// convergence-rate simplex when the strategy defines one.
#[derive(Debug, Clone)]
pub struct CombineResult {
    pub combined: DenseMatrix,
    /// Effective multiplier applied to each task gradient. Not every
    /// strategy is a linear reweighting (surgery and the sign lottery are
    /// not); those report their nominal weights (all ones).
    pub weights: Vec<f64>,
    /// Common magnitude `C` for magnitude equalization; 1 elsewhere.
    pub scale: f64,
    /// Convergence-rate simplex `α` (magnitude equalization only).
    pub alphas: Option<Vec<f64>>,
    pub diagnostics: CombineDiagnostics,
}

/// Cosine similarity between two equally-shaped batch gradients under the
/// Frobenius inner product; 0 if either norm is below the zero guard.
pub fn batch_cosine(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, CombineError> {
    let na = a.frob_norm();
    let nb = b.frob_norm();
    if na <= ZERO_NORM_EPS || nb <= ZERO_NORM_EPS {
        return Ok(0.0);
    }
    Ok(a.frob_dot(b)? / (na * nb))
}

fn check_grads(grads: &[DenseMatrix]) -> Result<(usize, usize), CombineError> {
    let first = grads.first().ok_or(CombineError::Empty)?;
    let (rows, cols) = (first.rows(), first.cols());
    for (k, g) in grads.iter().enumerate() {
        if g.rows() != rows || g.cols() != cols {
            return Err(CombineError::ShapeMismatch {
                k,
                rows,
                cols,
                got_rows: g.rows(),
                got_cols: g.cols(),
            });
        }
    }
    Ok((rows, cols))
}

fn base_diagnostics(grads: &[DenseMatrix]) -> Result<CombineDiagnostics, CombineError> {
    let mut d = CombineDiagnostics::default();
    d.task_norms = grads.iter().map(DenseMatrix::frob_norm).collect();
    for (k, &n) in d.task_norms.iter().enumerate() {
        if n <= ZERO_NORM_EPS {
            d.zero_norm_tasks.push(k);
        }
    }
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            d.pairwise_cos.push(batch_cosine(&grads[i], &grads[j])?);
        }
    }
    Ok(d)
}

fn finish(
    grads: &[DenseMatrix],
    combined: DenseMatrix,
    weights: Vec<f64>,
    scale: f64,
    alphas: Option<Vec<f64>>,
    mut diagnostics: CombineDiagnostics,
) -> Result<CombineResult, CombineError> {
    diagnostics.update_task_cos =
        grads.iter().map(|g| batch_cosine(g, &combined)).collect::<Result<_, _>>()?;
    Ok(CombineResult { combined, weights, scale, alphas, diagnostics })
}

/// Plain sum of the task gradients, in task order.
pub fn vanilla(grads: &[DenseMatrix]) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    let diag = base_diagnostics(grads)?;
    let mut combined = DenseMatrix::zeros(rows, cols);
    for g in grads {
        combined.add_scaled(g, 1.0)?;
    }
    finish(grads, combined, vec![1.0; grads.len()], 1.0, None, diag)
}

/// Magnitude equalization.
///
/// With current norms `n_k` and reference norms `n_k⁰` (captured at the
/// first step), the convergence-rate simplex is `α_k ∝ n_k / n_k⁰`
/// (normalized to sum 1), the common magnitude is `C = Σ_k α_k n_k`, and
/// each task is applied with multiplier `ω_k = C / n_k`, so every
/// contribution `ω_k G_k` has Frobenius norm exactly `C`.
///
/// Tasks whose current or reference norm is below the zero guard are
/// excluded: they get `α_k = ω_k = 0` and are logged. If every task is
/// excluded the combination is zero and no simplex is defined.
pub fn scale_only(grads: &[DenseMatrix], initial_norms: &[f64]) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    let k_tasks = grads.len();
    if initial_norms.len() != k_tasks {
        return Err(CombineError::NormCount { expected: k_tasks, got: initial_norms.len() });
    }
    let mut diag = base_diagnostics(grads)?;
    let norms = diag.task_norms.clone();

    let mut ratios = vec![0.0; k_tasks];
    let mut active = vec![false; k_tasks];
    for k in 0..k_tasks {
        if norms[k] <= ZERO_NORM_EPS {
            diag.notes.push(format!("task {k}: zero gradient, excluded from equalization"));
        } else if initial_norms[k] <= ZERO_NORM_EPS {
            diag.notes.push(format!("task {k}: zero reference norm, excluded from equalization"));
        } else {
            ratios[k] = norms[k] / initial_norms[k];
            active[k] = true;
        }
    }
    let ratio_sum: f64 = ratios.iter().sum();
    if ratio_sum <= 0.0 {
        diag.notes.push("all tasks excluded: combined update is zero".into());
        let combined = DenseMatrix::zeros(rows, cols);
        return finish(grads, combined, vec![0.0; k_tasks], 0.0, None, diag);
    }

    let alphas: Vec<f64> = ratios.iter().map(|r| r / ratio_sum).collect();
    let mut c = 0.0;
    for k in 0..k_tasks {
        c += alphas[k] * norms[k];
    }
    let weights: Vec<f64> =
        (0..k_tasks).map(|k| if active[k] { c / norms[k] } else { 0.0 }).collect();
    let mut combined = DenseMatrix::zeros(rows, cols);
    for k in 0..k_tasks {
        if active[k] {
            combined.add_scaled(&grads[k], weights[k])?;
        }
    }
    finish(grads, combined, weights, c, Some(alphas), diag)
}

/// Per-task surgered gradients: each task's flattened gradient has the
/// projections onto conflicting (negative inner product) other tasks
/// subtracted, visiting the other tasks in a random order drawn from `rng`.
/// Zero-norm tasks are never projected onto.
pub fn pcgrad_surgery(grads: &[DenseMatrix], rng: &mut ChaCha8Rng) -> Result<Vec<DenseMatrix>, CombineError> {
    check_grads(grads)?;
    let k_tasks = grads.len();
    let sq_norms: Vec<f64> = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum()).collect();
    let mut surgered = Vec::with_capacity(k_tasks);
    for i in 0..k_tasks {
        let mut gi = grads[i].clone();
        let mut order: Vec<usize> = (0..k_tasks).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            if sq_norms[j] <= ZERO_NORM_EPS * ZERO_NORM_EPS {
                continue;
            }
            let dot = gi.frob_dot(&grads[j])?;
            if dot < 0.0 {
                gi.add_scaled(&grads[j], -dot / sq_norms[j])?;
            }
        }
        surgered.push(gi);
    }
    Ok(surgered)
}

/// Projection surgery: sum of the [`pcgrad_surgery`] gradients.
pub fn pcgrad(grads: &[DenseMatrix], rng: &mut ChaCha8Rng) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    let diag = base_diagnostics(grads)?;
    let parts = pcgrad_surgery(grads, rng)?;
    let mut combined = DenseMatrix::zeros(rows, cols);
    for p in &parts {
        combined.add_scaled(p, 1.0)?;
    }
    finish(grads, combined, vec![1.0; grads.len()], 1.0, None, diag)
}

/// Sign purity of one coordinate: `½(1 + Σ_k g_k / Σ_k |g_k|)`, in `[0, 1]`.
/// 1 means every task pushes positive, 0 means every task pushes negative.
fn sign_purity(signed_sum: f64, abs_sum: f64) -> f64 {
    0.5 * (1.0 + signed_sum / abs_sum)
}

/// Sign lottery. Per coordinate, draw `U ~ Uniform[0,1)` and keep the
/// positive contributions iff the sign purity exceeds `U`, otherwise the
/// negative ones; the dropped side is blended back scaled by `leak`.
/// Coordinates where every task is zero stay zero.
pub fn graddrop(grads: &[DenseMatrix], rng: &mut ChaCha8Rng, leak: f64) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    CombinerKind::GradDrop { leak }.validate()?;
    let diag = base_diagnostics(grads)?;
    let len = rows * cols;
    let mut combined = DenseMatrix::zeros(rows, cols);
    for idx in 0..len {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut abs = 0.0;
        for g in grads {
            let v = g.data()[idx];
            pos += v.max(0.0);
            neg += v.min(0.0);
            abs += v.abs();
        }
        if abs <= ZERO_NORM_EPS {
            continue;
        }
        let p = sign_purity(pos + neg, abs);
        let u = rng.random::<f64>();
        combined.data_mut()[idx] = if p > u { pos + leak * neg } else { neg + leak * pos };
    }
    finish(grads, combined, vec![1.0; grads.len()], 1.0, None, diag)
}

/// One online norm-balancing step.
///
/// Scaled norms `w_k ‖G_k‖` are pulled toward the targets
/// `Ḡ · r_k^alpha`, where `Ḡ` is the mean scaled norm and `r_k` the
/// relative inverse training rate `L̃_k / mean(L̃)` with
/// `L̃_k = losses[k] / initial_losses[k]`. Targets are treated as constants,
/// so the weight-loss `Σ_k |w_k ‖G_k‖ - target_k|` has the subgradient
/// `sign(w_k ‖G_k‖ - target_k) · ‖G_k‖` in `w_k`. After the step with rate
/// `lr_w`, nonpositive weights are clamped to 1e-6 (logged) and the vector
/// is renormalized to sum `K`. The weights vector is updated in place.
pub fn gradnorm(
    grads: &[DenseMatrix],
    weights: &mut [f64],
    losses: &[f64],
    initial_losses: &[f64],
    alpha: f64,
    lr_w: f64,
) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    CombinerKind::GradNorm { alpha }.validate()?;
    let k_tasks = grads.len();
    if weights.len() != k_tasks {
        return Err(CombineError::WeightCount { expected: k_tasks, got: weights.len() });
    }
    if losses.len() != k_tasks {
        return Err(CombineError::LossCount { expected: k_tasks, got: losses.len() });
    }
    if initial_losses.len() != k_tasks {
        return Err(CombineError::LossCount { expected: k_tasks, got: initial_losses.len() });
    }
    let mut diag = base_diagnostics(grads)?;
    let norms = diag.task_norms.clone();

    let ratios: Vec<f64> = (0..k_tasks)
        .map(|k| {
            let mut reference = initial_losses[k];
            if reference.abs() < 1e-12 {
                reference = 1e-12f64.copysign(if reference == 0.0 { 1.0 } else { reference });
                diag.notes.push(format!("task {k}: reference loss clamped to {reference:e}"));
            }
            losses[k] / reference
        })
        .collect();
    let ratio_mean = ratios.iter().sum::<f64>() / k_tasks as f64;
    let rel_rates: Vec<f64> = if ratio_mean.abs() < 1e-12 {
        diag.notes.push("degenerate inverse training rates, using uniform targets".into());
        vec![1.0; k_tasks]
    } else {
        ratios.iter().map(|r| r / ratio_mean).collect()
    };

    let gbar = (0..k_tasks).map(|k| weights[k] * norms[k]).sum::<f64>() / k_tasks as f64;
    for k in 0..k_tasks {
        let target = gbar * rel_rates[k].powf(alpha);
        let gap = weights[k] * norms[k] - target;
        // subgradient: sign(gap) * ||G_k||; sign(0) = 0 keeps fixed points fixed
        let step = gap.signum() * norms[k];
        let step = if gap == 0.0 { 0.0 } else { step };
        weights[k] -= lr_w * step;
        if weights[k] <= 0.0 {
            diag.notes.push(format!("task {k}: weight clamped to 1e-6 after step"));
            weights[k] = 1e-6;
        }
    }
    let sum: f64 = weights.iter().sum();
    let factor = k_tasks as f64 / sum;
    for w in weights.iter_mut() {
        *w *= factor;
    }

    let mut combined = DenseMatrix::zeros(rows, cols);
    for k in 0..k_tasks {
        combined.add_scaled(&grads[k], weights[k])?;
    }
    finish(grads, combined, weights.to_vec(), 1.0, None, diag)
}

/// Frank–Wolfe min-norm point of the convex hull of the task gradients.
///
/// Works entirely in the `K × K` Gram matrix. Starts from uniform weights
/// and repeatedly line-searches toward the vertex with the smallest
/// correlation, stopping when the squared-norm objective decreases by less
/// than `tol` or after `max_iter` iterations (non-convergence is flagged in
/// the diagnostics and the last iterate is returned).
pub fn mgda_ub(grads: &[DenseMatrix], max_iter: usize, tol: f64) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    CombinerKind::MgdaUb { max_iter, tol }.validate()?;
    let k_tasks = grads.len();
    let mut diag = base_diagnostics(grads)?;

    let mut gram = vec![0.0; k_tasks * k_tasks];
    for i in 0..k_tasks {
        for j in i..k_tasks {
            let dot = grads[i].frob_dot(&grads[j])?;
            gram[i * k_tasks + j] = dot;
            gram[j * k_tasks + i] = dot;
        }
    }

    let mut w = vec![1.0 / k_tasks as f64; k_tasks];
    let objective = |w: &[f64]| -> f64 {
        let mut obj = 0.0;
        for i in 0..k_tasks {
            for j in 0..k_tasks {
                obj += w[i] * w[j] * gram[i * k_tasks + j];
            }
        }
        obj
    };
    let mut obj = objective(&w);
    let mut iterations = 0;
    let mut converged = k_tasks == 1;
    for _ in 0..max_iter {
        if k_tasks == 1 {
            break;
        }
        iterations += 1;
        let mut mw = vec![0.0; k_tasks];
        for i in 0..k_tasks {
            for j in 0..k_tasks {
                mw[i] += gram[i * k_tasks + j] * w[j];
            }
        }
        let mut vertex = 0;
        for t in 1..k_tasks {
            if mw[t] < mw[vertex] {
                vertex = t;
            }
        }
        // exact line search on the segment toward the chosen vertex:
        // f(γ) = (1-γ)² a + 2γ(1-γ) b + γ² c
        let a = obj;
        let b = mw[vertex];
        let c = gram[vertex * k_tasks + vertex];
        let denom = a - 2.0 * b + c;
        let gamma = if denom <= 0.0 { 0.0 } else { ((a - b) / denom).clamp(0.0, 1.0) };
        let mut next = vec![0.0; k_tasks];
        for t in 0..k_tasks {
            next[t] = (1.0 - gamma) * w[t];
        }
        next[vertex] += gamma;
        let next_obj = objective(&next);
        let decrease = obj - next_obj;
        w = next;
        obj = next_obj;
        if decrease < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        diag.notes.push(format!("min-norm solver hit the iteration cap ({max_iter})"));
    }
    diag.fw_iterations = Some(iterations);
    diag.fw_converged = Some(converged);

    let mut combined = DenseMatrix::zeros(rows, cols);
    for k in 0..k_tasks {
        combined.add_scaled(&grads[k], w[k])?;
    }
    finish(grads, combined, w, 1.0, None, diag)
}

/// Equal-projection weights: solve for `w` (and the common projection `c`)
/// such that `<Σ_t w_t G_t, u_j> = c` for every task's unit gradient `u_j`,
/// with `Σ_t w_t = K`. A singular or unreliable system (duplicated
/// gradients make equal projections infeasible) falls back to the plain sum
/// with a diagnostics flag.
pub fn imtl_g(grads: &[DenseMatrix]) -> Result<CombineResult, CombineError> {
    let (rows, cols) = check_grads(grads)?;
    let k_tasks = grads.len();
    let diag = base_diagnostics(grads)?;
    let norms = diag.task_norms.clone();

    let fallback = |mut diag: CombineDiagnostics, note: String| -> Result<CombineResult, CombineError> {
        diag.fallback_vanilla = true;
        diag.notes.push(note);
        let mut combined = DenseMatrix::zeros(rows, cols);
        for g in grads {
            combined.add_scaled(g, 1.0)?;
        }
        finish(grads, combined, vec![1.0; k_tasks], 1.0, None, diag)
    };

    if k_tasks == 1 {
        let combined = grads[0].clone();
        return finish(grads, combined, vec![1.0], 1.0, None, diag);
    }
    if norms.iter().any(|&n| n <= ZERO_NORM_EPS) {
        return fallback(diag, "zero-norm task gradient: equal projections undefined".into());
    }

    // unknowns: [w_0 .. w_{K-1}, c]
    let n = k_tasks + 1;
    let mut system = DenseMatrix::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for j in 0..k_tasks {
        for t in 0..k_tasks {
            system.set(j, t, grads[t].frob_dot(&grads[j])? / norms[j]);
        }
        system.set(j, k_tasks, -1.0);
    }
    for t in 0..k_tasks {
        system.set(k_tasks, t, 1.0);
    }
    rhs[k_tasks] = k_tasks as f64;

    let solution = match system.solve(&rhs) {
        Ok(s) => s,
        Err(LinalgError::Singular) => {
            return fallback(diag, "singular equal-projection system".into());
        }
        Err(e) => return Err(e.into()),
    };
    let weights = &solution[..k_tasks];
    if weights.iter().any(|w| !w.is_finite()) {
        return fallback(diag, "non-finite equal-projection weights".into());
    }

    let mut combined = DenseMatrix::zeros(rows, cols);
    for t in 0..k_tasks {
        combined.add_scaled(&grads[t], weights[t])?;
    }
    // verify the equal-projection property actually holds; a nearly
    // singular system that slipped past the pivot check lands here
    let projections: Vec<f64> = (0..k_tasks)
        .map(|j| combined.frob_dot(&grads[j]).map(|d| d / norms[j]))
        .collect::<Result<_, _>>()?;
    let mean_proj = projections.iter().sum::<f64>() / k_tasks as f64;
    let scale_ref = projections.iter().fold(1.0f64, |m, p| m.max(p.abs()));
    let defect = projections.iter().fold(0.0f64, |m, p| m.max((p - mean_proj).abs()));
    if defect > 1e-6 * scale_ref {
        return fallback(diag, format!("equal-projection defect {defect:.3e} too large, system ill-conditioned"));
    }
    finish(grads, combined, weights.to_vec(), 1.0, None, diag)
}

/// Result of the sufficient-descent check.
#[derive(Debug, Clone)]
pub struct Prop1Certificate {
    /// Smallest pairwise batch cosine among tasks with nonzero gradients;
    /// 1 when fewer than two such tasks exist.
    pub min_pairwise_cos: f64,
    /// The bound `-1/(K-1)`; negative infinity for a single task.
    pub threshold: f64,
    /// `min_pairwise_cos > threshold` (strict).
    pub holds: bool,
    /// Tasks excluded because their gradient norm is below the zero guard.
    pub excluded_tasks: Vec<usize>,
}

/// Check the sufficient descent condition: every pairwise cosine similarity
/// strictly above `-1/(K-1)` guarantees that a small enough step along the
/// equal-magnitude combination decreases every task loss. Zero gradients
/// are excluded from the pairwise minimum and reported.
pub fn prop1_certificate(grads: &[DenseMatrix]) -> Result<Prop1Certificate, CombineError> {
    check_grads(grads)?;
    let k_tasks = grads.len();
    let threshold = if k_tasks == 1 { f64::NEG_INFINITY } else { -1.0 / (k_tasks as f64 - 1.0) };
    let mut excluded = Vec::new();
    let mut active = Vec::new();
    for (k, g) in grads.iter().enumerate() {
        if g.frob_norm() <= ZERO_NORM_EPS {
            excluded.push(k);
        } else {
            active.push(k);
        }
    }
    let mut min_cos = 1.0f64;
    for (a, &i) in active.iter().enumerate() {
        for &j in &active[a + 1..] {
            min_cos = min_cos.min(batch_cosine(&grads[i], &grads[j])?);
        }
    }
    Ok(Prop1Certificate { min_pairwise_cos: min_cos, threshold, holds: min_cos > threshold, excluded_tasks: excluded })
}

/// Persistent combiner state: the strategy, its RNG stream, reference
/// norms/losses captured at the first step, and the norm-balancing weights
/// that live across steps.
#[derive(Debug, Clone)]
pub struct CombinerState {
    kind: CombinerKind,
    num_tasks: usize,
    rng: ChaCha8Rng,
    initial_norms: Option<Vec<f64>>,
    initial_losses: Option<Vec<f64>>,
    gradnorm_weights: Vec<f64>,
}

impl CombinerState {
    pub fn new(kind: CombinerKind, num_tasks: usize, rng: ChaCha8Rng) -> Result<Self, CombineError> {
        kind.validate()?;
        if num_tasks == 0 {
            return Err(CombineError::Empty);
        }
        Ok(Self {
            kind,
            num_tasks,
            rng,
            initial_norms: None,
            initial_losses: None,
            gradnorm_weights: vec![1.0; num_tasks],
        })
    }

    pub fn kind(&self) -> CombinerKind {
        self.kind
    }

    /// Reference norms captured at the first combination, if any yet.
    pub fn initial_norms(&self) -> Option<&[f64]> {
        self.initial_norms.as_deref()
    }

    /// Live norm-balancing weights.
    pub fn gradnorm_weights(&self) -> &[f64] {
        &self.gradnorm_weights
    }

    /// Combine one step's task gradients. `losses` are the current task
    /// losses (as optimized) and `method_lr` the scheduled learning rate for
    /// strategies that take internal steps.
    pub fn combine(
        &mut self,
        grads: &[DenseMatrix],
        losses: &[f64],
        method_lr: f64,
    ) -> Result<CombineResult, CombineError> {
        if grads.len() != self.num_tasks {
            return Err(CombineError::ShapeMismatch {
                k: grads.len(),
                rows: 0,
                cols: 0,
                got_rows: 0,
                got_cols: 0,
            });
        }
        if losses.len() != self.num_tasks {
            return Err(CombineError::LossCount { expected: self.num_tasks, got: losses.len() });
        }
        if self.initial_norms.is_none() {
            self.initial_norms = Some(grads.iter().map(DenseMatrix::frob_norm).collect());
            self.initial_losses = Some(losses.to_vec());
        }
        match self.kind {
            CombinerKind::Vanilla => vanilla(grads),
            CombinerKind::ScaleOnly => {
                let init = self.initial_norms.as_ref().expect("captured above");
                scale_only(grads, init)
            }
            CombinerKind::PcGrad => pcgrad(grads, &mut self.rng),
            CombinerKind::GradDrop { leak } => graddrop(grads, &mut self.rng, leak),
            CombinerKind::GradNorm { alpha } => {
                let init = self.initial_losses.clone().expect("captured above");
                gradnorm(grads, &mut self.gradnorm_weights, losses, &init, alpha, method_lr)
            }
            CombinerKind::MgdaUb { max_iter, tol } => mgda_ub(grads, max_iter, tol),
            CombinerKind::ImtlG => imtl_g(grads),
        }
    }
}
