//! Synthetic multitask problem suite.
//!
//! Two closed-form two-task regression families defined on the plane (a
//! convex bowl pair and a nonconvex sinc-style pair, identical across tasks
//! up to a translation), the opposite-labels logistic worst case, and a
//! configurable Gaussian-mixture generator for scaling past two tasks.
//! Everything downstream consumes [`TaskData`]: an input batch plus one
//! label column per task, optionally with a clean held-out split.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, LinalgError};
use crate::net::AnalyticLoss;

/// Errors from task-spec validation and generation.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("need at least {min} tasks for {kind}, got {got}")]
    TooFewTasks { kind: &'static str, min: usize, got: usize },
    #[error("flip probability must be in [0, 1], got {0}")]
    BadFlipProb(f64),
    #[error("noise must be finite and >= 0, got {0}")]
    BadNoise(f64),
    #[error("sample count must be >= 1")]
    NoSamples,
    #[error("input dimension must be >= 2, got {0}")]
    BadInputDim(usize),
    #[error("{kind} requires one shift per task: {expected} tasks, {got} shifts")]
    ShiftCount { kind: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Which synthetic problem family to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Convex bowls `(x - s)² + 25 y²`, one shift per task.
    Avocado,
    /// Nonconvex pair `ψ(x + 1.5 s) + ψ(y + 1.5 s)` with
    /// `ψ(u) = |u| - sin(3u)/u`, one shift per task.
    Nonconvex,
    /// Two-cluster 2D mixture; task 1 predicts the cluster, task 2 the
    /// opposite label with a small flip rate.
    OppositeLogistic,
    /// Gaussian-mixture generator: the opposite-label pair plus optional
    /// linear regression tasks on the shared input.
    GaussianMultitask,
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of tasks `K`.
    pub num_tasks: usize,
    /// Per-task shift `s_k` (closed-form families only).
    #[serde(default)]
    pub shifts: Vec<f64>,
    /// Sample count for dataset families; the closed-form families use a
    /// single random input.
    pub samples: usize,
    /// Input dimension (mixture families; the plane families are 2-D).
    pub input_dim: usize,
    /// Standard deviation of regression target noise.
    pub noise: f64,
    /// Probability of flipping the inverted classification labels.
    pub flip_prob: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// The two convex bowls with shifts -1 and +1, so the two optima sit at
    /// mirrored positions equidistant from the feature-space origin. Length
    /// is preserved by every proper rotation, so equal optimum norms are
    /// exactly what lets per-task rotations satisfy both tasks at once;
    /// asymmetric shifts would make joint success unreachable by rotation.
    pub fn avocado_pair(seed: u64) -> Self {
        Self {
            kind: TaskKind::Avocado,
            num_tasks: 2,
            shifts: vec![-1.0, 1.0],
            samples: 1,
            input_dim: 2,
            noise: 0.0,
            flip_prob: 0.0,
            seed,
        }
    }

    /// The two nonconvex surfaces with shifts -1 and +1 (optima at
    /// `(1.5, 1.5)` and `(-1.5, -1.5)`, equidistant from the origin).
    pub fn nonconvex_pair(seed: u64) -> Self {
        Self { kind: TaskKind::Nonconvex, ..Self::avocado_pair(seed) }
    }

    /// The opposite-labels logistic pair: 1000 samples, 5% flips.
    pub fn opposite_logistic(seed: u64) -> Self {
        Self {
            kind: TaskKind::OppositeLogistic,
            num_tasks: 2,
            shifts: Vec::new(),
            samples: 1000,
            input_dim: 2,
            noise: 0.0,
            flip_prob: 0.05,
            seed,
        }
    }

    /// Mixture generator with `k` tasks in `d` dimensions.
    pub fn gaussian_multitask(k: usize, d: usize, samples: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::GaussianMultitask,
            num_tasks: k,
            shifts: Vec::new(),
            samples,
            input_dim: d,
            noise: 0.1,
            flip_prob: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TaskError::BadFlipProb(self.flip_prob));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(TaskError::BadNoise(self.noise));
        }
        if self.samples == 0 {
            return Err(TaskError::NoSamples);
        }
        match self.kind {
            TaskKind::Avocado | TaskKind::Nonconvex => {
                let kind = kind_name(self.kind);
                if self.num_tasks < 1 {
                    return Err(TaskError::TooFewTasks { kind, min: 1, got: self.num_tasks });
                }
                if self.shifts.len() != self.num_tasks {
                    return Err(TaskError::ShiftCount {
                        kind,
                        expected: self.num_tasks,
                        got: self.shifts.len(),
                    });
                }
            }
            TaskKind::OppositeLogistic => {
                if self.num_tasks != 2 {
                    return Err(TaskError::TooFewTasks {
                        kind: "opposite_logistic",
                        min: 2,
                        got: self.num_tasks,
                    });
                }
            }
            TaskKind::GaussianMultitask => {
                if self.num_tasks < 2 {
                    return Err(TaskError::TooFewTasks {
                        kind: "gaussian_multitask",
                        min: 2,
                        got: self.num_tasks,
                    });
                }
                if self.input_dim < 2 {
                    return Err(TaskError::BadInputDim(self.input_dim));
                }
            }
        }
        Ok(())
    }
}

fn kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Avocado => "avocado",
        TaskKind::Nonconvex => "nonconvex",
        TaskKind::OppositeLogistic => "opposite_logistic",
        TaskKind::GaussianMultitask => "gaussian_multitask",
    }
}

/// One batch: shared inputs and one label column per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × D` inputs.
    pub x: DenseMatrix,
    /// Per-task labels, each `B × 1`.
    pub labels: Vec<DenseMatrix>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// A generated dataset: the training batch and, for the mixture families,
/// a same-size held-out batch with clean (unflipped) classification labels.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Batch,
    pub holdout: Option<Batch>,
}

/// Convex bowl: `(x - s)² + 25 y²`.
pub fn avocado(p: (f64, f64), s: f64) -> f64 {
    let (x, y) = p;
    (x - s) * (x - s) + 25.0 * y * y
}

/// Gradient of [`avocado`]: `(2(x - s), 50 y)`.
pub fn avocado_grad(p: (f64, f64), s: f64) -> (f64, f64) {
    let (x, y) = p;
    (2.0 * (x - s), 50.0 * y)
}

/// `sin(3u)/u`, evaluated through its removable singularity: below
/// `|u| = 1e-4` a 5-term even Taylor expansion (error far below machine
/// precision there) takes over, giving the limit value 3 at `u = 0`.
fn sinc3(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        // sin(3u)/u = Σ_k (-1)^k 3^(2k+1) u^(2k) / (2k+1)!
        let u2 = u * u;
        let mut term = 3.0;
        let mut sum = term;
        for k in 1..5u32 {
            let two_k = 2.0 * k as f64;
            term *= -9.0 * u2 / (two_k * (two_k + 1.0));
            sum += term;
        }
        sum
    } else {
        (3.0 * u).sin() / u
    }
}

/// Derivative of [`sinc3`], with the matching series branch near zero.
fn sinc3_prime(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        // d/du Σ_k (-1)^k 3^(2k+1) u^(2k) / (2k+1)! = Σ_{k≥1} (-1)^k 3^(2k+1) 2k u^(2k-1) / (2k+1)!
        let mut coeff = 3.0;
        let mut sum = 0.0;
        for k in 1..5u32 {
            let two_k = 2.0 * k as f64;
            coeff *= -9.0 / (two_k * (two_k + 1.0));
            sum += coeff * two_k * u.powi(2 * k as i32 - 1);
        }
        sum
    } else {
        (3.0 * (3.0 * u).cos() * u - (3.0 * u).sin()) / (u * u)
    }
}

/// One-dimensional component of the nonconvex family:
/// `ψ(u) = |u| - sin(3u)/u`. Global minimum `-3` at `u = 0`.
fn psi(u: f64) -> f64 {
    u.abs() - sinc3(u)
}

/// Subgradient of [`psi`]; 0 is chosen at the absolute-value kink.
fn psi_prime(u: f64) -> f64 {
    let sign = if u == 0.0 { 0.0 } else { u.signum() };
    sign - sinc3_prime(u)
}

/// Nonconvex surface: `ψ(x + 1.5 s) + ψ(y + 1.5 s)`. Written out:
/// `-sin(3x + 4.5s)/(x + 1.5s) - sin(3y + 4.5s)/(y + 1.5s)
///  + |x + 1.5s| + |y + 1.5s|`, since `3u = 3x + 4.5s` for `u = x + 1.5s`.
/// Global minimum `-6` at `(x, y) = (-1.5 s, -1.5 s)`.
pub fn nonconvex(p: (f64, f64), s: f64) -> f64 {
    let (x, y) = p;
    psi(x + 1.5 * s) + psi(y + 1.5 * s)
}

/// Subgradient of [`nonconvex`] (0 at the kinks).
pub fn nonconvex_grad(p: (f64, f64), s: f64) -> (f64, f64) {
    let (x, y) = p;
    (psi_prime(x + 1.5 * s), psi_prime(y + 1.5 * s))
}

/// Per-sample analytic loss for one convex-bowl task, applied to a 2-D
/// head output; labels are ignored.
#[derive(Debug, Clone)]
pub struct AvocadoLoss {
    pub shift: f64,
}

impl AnalyticLoss for AvocadoLoss {
    fn name(&self) -> &str {
        "avocado"
    }

    fn value(&self, pred: &[f64]) -> f64 {
        assert_eq!(pred.len(), 2, "avocado loss needs a 2-D prediction");
        avocado((pred[0], pred[1]), self.shift)
    }

    fn grad(&self, pred: &[f64], out: &mut [f64]) {
        assert_eq!(pred.len(), 2, "avocado loss needs a 2-D prediction");
        let (gx, gy) = avocado_grad((pred[0], pred[1]), self.shift);
        out[0] = gx;
        out[1] = gy;
    }
}

/// Per-sample analytic loss for one nonconvex task on a 2-D head output.
#[derive(Debug, Clone)]
pub struct NonconvexLoss {
    pub shift: f64,
}

impl AnalyticLoss for NonconvexLoss {
    fn name(&self) -> &str {
        "nonconvex"
    }

    fn value(&self, pred: &[f64]) -> f64 {
        assert_eq!(pred.len(), 2, "nonconvex loss needs a 2-D prediction");
        nonconvex((pred[0], pred[1]), self.shift)
    }

    fn grad(&self, pred: &[f64], out: &mut [f64]) {
        assert_eq!(pred.len(), 2, "nonconvex loss needs a 2-D prediction");
        let (gx, gy) = nonconvex_grad((pred[0], pred[1]), self.shift);
        out[0] = gx;
        out[1] = gy;
    }
}

/// The two mixture cluster means: on the circle of radius `2√2` at phase
/// `π/4` and its antipode, i.e. exactly `(2, 2)` and `(-2, -2)` in the
/// first two coordinates, zero-padded beyond.
fn cluster_mean(cluster: usize, dim: usize) -> Vec<f64> {
    let radius = 2.0 * std::f64::consts::SQRT_2;
    let phase = std::f64::consts::FRAC_PI_4 + std::f64::consts::PI * cluster as f64;
    let mut mean = vec![0.0; dim];
    mean[0] = radius * phase.cos();
    mean[1] = radius * phase.sin();
    mean
}

struct MixtureDraw {
    x: Vec<f64>,
    cluster: usize,
    flip: f64,
}

/// Draw one mixture sample: cluster coin, standard-normal offsets around
/// the cluster mean, and the flip coin, in that fixed order.
fn draw_mixture_sample(rng: &mut ChaCha8Rng, dim: usize) -> MixtureDraw {
    let cluster = usize::from(rng.random::<f64>() < 0.5);
    let mean = cluster_mean(cluster, dim);
    let x: Vec<f64> = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
    let flip = rng.random::<f64>();
    MixtureDraw { x, cluster, flip }
}

fn mixture_batch(
    rng: &mut ChaCha8Rng,
    samples: usize,
    dim: usize,
    flip_prob: f64,
    regression_weights: &[Vec<f64>],
    noise: f64,
) -> Result<Batch, TaskError> {
    let num_tasks = 2 + regression_weights.len();
    let mut x = DenseMatrix::zeros(samples, dim);
    let mut labels: Vec<DenseMatrix> = (0..num_tasks).map(|_| DenseMatrix::zeros(samples, 1)).collect();
    for n in 0..samples {
        let draw = draw_mixture_sample(rng, dim);
        for (j, v) in draw.x.iter().enumerate() {
            x.set(n, j, *v);
        }
        let y1 = draw.cluster as f64;
        let mut y2 = 1.0 - y1;
        if draw.flip < flip_prob {
            y2 = 1.0 - y2;
        }
        labels[0].set(n, 0, y1);
        labels[1].set(n, 0, y2);
        for (r, w) in regression_weights.iter().enumerate() {
            let mut target: f64 = w.iter().zip(&draw.x).map(|(wi, xi)| wi * xi).sum();
            if noise > 0.0 {
                target += noise * rng.sample::<f64, _>(StandardNormal);
            } else {
                // keep the stream aligned across noise settings
                let _: f64 = rng.sample(StandardNormal);
            }
            labels[2 + r].set(n, 0, target);
        }
    }
    Ok(Batch { x, labels })
}

/// Opposite-labels logistic data: `samples` points from the two-cluster
/// mixture; task 1's label is the cluster indicator, task 2's the opposite
/// label flipped with probability `flip_prob`. The held-out split is a
/// fresh draw of the same size with no flips.
pub fn opposite_logistic_data(spec: &TaskSpec) -> Result<TaskData, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let train = mixture_batch(&mut rng, spec.samples, spec.input_dim, spec.flip_prob, &[], 0.0)?;
    let holdout = mixture_batch(&mut rng, spec.samples, spec.input_dim, 0.0, &[], 0.0)?;
    Ok(TaskData { spec: spec.clone(), train, holdout: Some(holdout) })
}

/// Gaussian-mixture multitask data. Tasks 0 and 1 are the opposite-label
/// classification pair; tasks 2..K are linear regressions
/// `y = ⟨w_j, x⟩ + noise·ε` with per-task weights `w_j` drawn once from the
/// seed stream (scaled by `1/√D`). With `K = 2` and `D = 2` this reproduces
/// [`opposite_logistic_data`]'s distribution. The held-out split has clean
/// classification labels.
pub fn gaussian_multitask(spec: &TaskSpec) -> Result<TaskData, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let scale = 1.0 / (spec.input_dim as f64).sqrt();
    let regression_weights: Vec<Vec<f64>> = (0..spec.num_tasks.saturating_sub(2))
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let train = mixture_batch(
        &mut rng,
        spec.samples,
        spec.input_dim,
        spec.flip_prob,
        &regression_weights,
        spec.noise,
    )?;
    let holdout = mixture_batch(
        &mut rng,
        spec.samples,
        spec.input_dim,
        0.0,
        &regression_weights,
        spec.noise,
    )?;
    Ok(TaskData { spec: spec.clone(), train, holdout: Some(holdout) })
}

/// Generate the dataset a spec describes. The closed-form families produce
/// a single standard-normal input (fixed by the seed) and all-zero label
/// columns, since their losses are analytic in the head output.
pub fn generate(spec: &TaskSpec) -> Result<TaskData, TaskError> {
    spec.validate()?;
    match spec.kind {
        TaskKind::Avocado | TaskKind::Nonconvex => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(0);
            let x = DenseMatrix::from_fn(spec.samples, 2, |_, _| StandardNormal.sample(&mut rng));
            let labels = (0..spec.num_tasks).map(|_| DenseMatrix::zeros(spec.samples, 1)).collect();
            Ok(TaskData { spec: spec.clone(), train: Batch { x, labels }, holdout: None })
        }
        TaskKind::OppositeLogistic => opposite_logistic_data(spec),
        TaskKind::GaussianMultitask => gaussian_multitask(spec),
    }
}
