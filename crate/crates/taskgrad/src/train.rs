//! The training loop: per-step gradient combination, feature rotation, and
//! parameter updates, with leader/follower learning-rate schedules,
//! first-iteration loss normalization, and validation checkpointing.
//!
//! One [`train_step`](TrainState::train_step) executes, in order: the shared
//! forward pass; per task the rotated loss, the shared-feature gradient, the
//! rotated-space gradient (held constant for the rotation update), the unit
//! gradient, and the relative convergence rate; the convergence-rate
//! normalization and the shared magnitude; the backbone update; the
//! alignment target; and per task the rotation loss, the rotation update,
//! and the head update. An instrumentation buffer can record these
//! milestones as [`StepEvent`]s so tests can assert the exact order.
//!
//! Rotations lead, network parameters follow: the config validator warns
//! whenever the rotation step size or its decay schedule would make the
//! rotations the faster learner.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combine::{CombineError, CombinerKind, CombinerState};
use crate::linalg::{DenseMatrix, LinalgError, SkewParam, ZERO_NORM_EPS};
use crate::net::{Head, LossKind, Mlp, NetError, NetGrads};
use crate::rotation::{make_target, RotationError, RotationSet};
use crate::tasks::Batch;

/// Loss value above which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// The step index at which loss-normalization constants are re-captured.
pub const NORMALIZATION_REFRESH_STEP: u64 = 20;

/// Errors from configuration, stepping, and fitting.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("task {task} diverged at step {step}: loss {loss}")]
    Diverged { task: usize, loss: f64, step: u64 },
    #[error("batch has {got} label sets for {expected} tasks")]
    LabelCount { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyData,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Exponentially decayed learning rate: `lr₀ · decay^t`.
pub fn schedule(lr0: f64, decay: f64, t: u64) -> f64 {
    lr0 * decay.powi(t.min(i32::MAX as u64) as i32)
}

/// Per-parameter-group optimizer rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd { momentum: f64, nesterov: bool, weight_decay: f64 },
    Adaptive { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Plain gradient descent.
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0, nesterov: false, weight_decay: 0.0 }
    }

    /// Bias-corrected first/second-moment scaling with variance
    /// rectification, using the standard constants.
    pub fn adaptive() -> Self {
        OptimizerKind::Adaptive { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn validate(&self, group: &str) -> Result<(), TrainError> {
        match *self {
            OptimizerKind::Sgd { momentum, weight_decay, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(TrainError::Config(format!("{group}: momentum must be in [0, 1), got {momentum}")));
                }
                if !weight_decay.is_finite() || weight_decay < 0.0 {
                    return Err(TrainError::Config(format!("{group}: weight decay must be >= 0, got {weight_decay}")));
                }
            }
            OptimizerKind::Adaptive { beta1, beta2, eps } => {
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(TrainError::Config(format!("{group}: {name} must be in [0, 1), got {b}")));
                    }
                }
                if !(eps > 0.0) {
                    return Err(TrainError::Config(format!("{group}: eps must be > 0, got {eps}")));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate, decay, and update rule for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub lr: f64,
    /// Exponential decay factor per step, in (0, 1].
    pub decay: f64,
    pub optimizer: OptimizerKind,
}

impl GroupConfig {
    fn validate(&self, group: &str) -> Result<(), TrainError> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(TrainError::Config(format!("{group}: learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config(format!("{group}: decay must be in (0, 1], got {}", self.decay)));
        }
        self.optimizer.validate(group)
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone and heads (the followers).
    pub network: GroupConfig,
    /// Rotations and combiner-internal steps (the leader).
    pub rotation: GroupConfig,
    pub combiner: CombinerKindConfig,
    pub rotations_enabled: bool,
    /// Rotate only the first `m` feature coordinates (default: all).
    pub subspace: Option<usize>,
    pub normalize_losses: bool,
    pub seed: u64,
}

/// Serializable mirror of [`CombinerKind`] for configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CombinerKindConfig {
    Vanilla,
    ScaleOnly,
    PcGrad,
    GradDrop {
        #[serde(default)]
        leak: f64,
    },
    GradNorm { alpha: f64 },
    MgdaUb {
        #[serde(default = "default_mgda_iter")]
        max_iter: usize,
        #[serde(default = "default_mgda_tol")]
        tol: f64,
    },
    ImtlG,
}

fn default_mgda_iter() -> usize {
    250
}

fn default_mgda_tol() -> f64 {
    1e-7
}

impl From<CombinerKindConfig> for CombinerKind {
    fn from(c: CombinerKindConfig) -> Self {
        match c {
            CombinerKindConfig::Vanilla => CombinerKind::Vanilla,
            CombinerKindConfig::ScaleOnly => CombinerKind::ScaleOnly,
            CombinerKindConfig::PcGrad => CombinerKind::PcGrad,
            CombinerKindConfig::GradDrop { leak } => CombinerKind::GradDrop { leak },
            CombinerKindConfig::GradNorm { alpha } => CombinerKind::GradNorm { alpha },
            CombinerKindConfig::MgdaUb { max_iter, tol } => CombinerKind::MgdaUb { max_iter, tol },
            CombinerKindConfig::ImtlG => CombinerKind::ImtlG,
        }
    }
}

impl TrainConfig {
    /// A plain-SGD config with the combiner and rotations switched off,
    /// suitable as a base for tests and demos.
    pub fn baseline(seed: u64) -> Self {
        Self {
            epochs: 1,
            batch_size: usize::MAX,
            network: GroupConfig { lr: 0.01, decay: 1.0, optimizer: OptimizerKind::sgd() },
            rotation: GroupConfig { lr: 0.005, decay: 1.0, optimizer: OptimizerKind::adaptive() },
            combiner: CombinerKindConfig::Vanilla,
            rotations_enabled: false,
            subspace: None,
            normalize_losses: false,
            seed,
        }
    }

    /// Validate hard constraints and return soft warnings. `feature_dim` is
    /// the shared-feature width when known.
    pub fn validate(&self, feature_dim: Option<usize>) -> Result<Vec<String>, TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        self.network.validate("network")?;
        self.rotation.validate("rotation")?;
        CombinerKind::from(self.combiner).validate()?;
        if self.rotations_enabled {
            let m = match (self.subspace, feature_dim) {
                (Some(m), _) => m,
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(TrainError::Config(
                        "rotations need an explicit subspace when the feature width cannot be inferred".into(),
                    ))
                }
            };
            if m < 2 {
                return Err(TrainError::Config(format!("rotation subspace must be >= 2, got {m}")));
            }
            if let Some(d) = feature_dim {
                if m > d {
                    return Err(TrainError::Config(format!("rotation subspace {m} exceeds feature width {d}")));
                }
            }
        }
        let mut warnings = Vec::new();
        if self.rotation.lr > self.network.lr {
            warnings.push(format!(
                "rotation learning rate {} exceeds the network's {}; the leader should be the slower learner (sweet spot: half the network rate)",
                self.rotation.lr, self.network.lr
            ));
        }
        if self.rotation.decay > self.network.decay {
            warnings.push(format!(
                "rotation decay {} is slower than the network's {}; the rotation schedule should decay at least as fast",
                self.rotation.decay, self.network.decay
            ));
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Default)]
struct TensorMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for one parameter group (a set of tensors addressed by
/// stable indices).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: u64,
    moments: Vec<TensorMoments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, t: 0, moments: Vec::new() }
    }

    /// Advance the shared step counter (bias correction) once per group step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one update to tensor `idx` in place.
    pub fn update(&mut self, idx: usize, lr: f64, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len(), "gradient/parameter length mismatch");
        if self.moments.len() <= idx {
            self.moments.resize_with(idx + 1, TensorMoments::default);
        }
        let store = &mut self.moments[idx];
        match self.kind {
            OptimizerKind::Sgd { momentum, nesterov, weight_decay } => {
                if momentum != 0.0 && store.m.len() != params.len() {
                    store.m = vec![0.0; params.len()];
                }
                for i in 0..params.len() {
                    let mut g = grad[i];
                    if weight_decay != 0.0 {
                        g += weight_decay * params[i];
                    }
                    if momentum != 0.0 {
                        let buf = &mut store.m[i];
                        *buf = momentum * *buf + g;
                        g = if nesterov { g + momentum * *buf } else { *buf };
                    }
                    params[i] -= lr * g;
                }
            }
            OptimizerKind::Adaptive { beta1, beta2, eps } => {
                if store.m.len() != params.len() {
                    store.m = vec![0.0; params.len()];
                    store.v = vec![0.0; params.len()];
                }
                let t = self.t.min(i32::MAX as u64) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                // Once the second-moment estimate has seen enough samples
                // for its variance to be tractable (rho_t > 4), the step is
                // damped by the rectification factor, which ramps from ~0
                // toward 1 as the estimate matures; this keeps mid-training
                // steps from staying at full magnitude on noisy gradients.
                let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                let rho_t = rho_inf - 2.0 * t as f64 * beta2.powi(t) / bc2;
                let rect = if rho_t > 4.0 {
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt()
                } else {
                    1.0
                };
                for i in 0..params.len() {
                    let g = grad[i];
                    store.m[i] = beta1 * store.m[i] + (1.0 - beta1) * g;
                    store.v[i] = beta2 * store.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = store.m[i] / bc1;
                    let v_hat = store.v[i] / bc2;
                    params[i] -= lr * rect * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// First-iteration loss normalization: divide every task loss by its value
/// at step 0; at step [`NORMALIZATION_REFRESH_STEP`] the stored constants
/// are replaced by that step's values, so the normalized losses are exactly
/// 1 again there. Constants with magnitude below 1e-12 are clamped (sign
/// preserved) and logged.
#[derive(Debug, Clone)]
pub struct LossNormalizer {
    enabled: bool,
    constants: Option<Vec<f64>>,
}

impl LossNormalizer {
    pub fn new(enabled: bool) -> Self {
        Self { enabled, constants: None }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// The divisor currently applied to task `k` (1 when disabled).
    pub fn constant(&self, k: usize) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        self.constants.as_ref().map_or(1.0, |c| c[k])
    }

    /// Normalize one step's raw losses, refreshing the stored constants when
    /// the step calls for it.
    pub fn apply(&mut self, step: u64, raw: &[f64], notes: &mut Vec<String>) -> Vec<f64> {
        if !self.enabled {
            return raw.to_vec();
        }
        if self.constants.is_none() || step == NORMALIZATION_REFRESH_STEP {
            let constants = raw
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    if c.abs() < 1e-12 {
                        let clamped = if c == 0.0 { 1e-12 } else { 1e-12f64.copysign(c) };
                        notes.push(format!("task {k}: normalization constant {c:e} clamped to {clamped:e}"));
                        clamped
                    } else {
                        c
                    }
                })
                .collect();
            self.constants = Some(constants);
        }
        let constants = self.constants.as_ref().expect("just captured");
        raw.iter().zip(constants).map(|(l, c)| l / c).collect()
    }
}

/// Milestones of one training step, in the order they are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    ForwardShared,
    TaskLoss(usize),
    FeatureGrad(usize),
    RotatedGrad(usize),
    UnitGrad(usize),
    RelativeConvergence(usize),
    AlphaNormalized,
    SharedMagnitude,
    /// Gradient merge by a combiner other than magnitude equalization.
    CombinerMerge,
    BackboneUpdate,
    TargetVector,
    RotationLoss(usize),
    RotationUpdate(usize),
    HeadUpdate(usize),
}

/// Everything recorded about one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    /// Task losses before normalization.
    pub raw_losses: Vec<f64>,
    /// Task losses as optimized (normalized when enabled).
    pub losses: Vec<f64>,
    /// Frobenius norms of the (normalized) shared-feature gradients.
    pub task_norms: Vec<f64>,
    /// Per-task multipliers the combiner applied.
    pub weights: Vec<f64>,
    /// Common magnitude `C` (magnitude equalization; 1 elsewhere).
    pub scale: f64,
    /// Convergence-rate simplex, when the combiner defines one.
    pub alphas: Option<Vec<f64>>,
    /// Pairwise task-gradient cosines, `(i, j)` pairs with `i < j`.
    pub pairwise_cos: Vec<f64>,
    /// Cosine between each task gradient and the applied combined update.
    pub update_task_cos: Vec<f64>,
    /// Per-task alignment losses (rotations enabled only).
    pub rotation_losses: Option<Vec<f64>>,
    pub lr_network: f64,
    pub lr_rotation: f64,
    pub notes: Vec<String>,
}

/// Per-epoch summary with validation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of the summed optimized losses.
    pub mean_step_loss: f64,
    /// Raw (unnormalized) per-task validation losses.
    pub validation_losses: Vec<f64>,
    /// Raw summed validation loss (the checkpoint criterion).
    pub validation_sum: f64,
    /// Per-task classification accuracy where the head defines one.
    pub accuracies: Vec<Option<f64>>,
    /// Whether this epoch produced the best checkpoint so far.
    pub is_best: bool,
}

/// Step and epoch records of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Parameter-only snapshot of a training state (optimizer moments and
/// normalization constants are deliberately not captured).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub backbone: Mlp,
    pub head_nets: Vec<Mlp>,
    pub skews: Vec<SkewParam>,
}

/// Keeps the best (strictly smallest) loss observation and its snapshot;
/// ties keep the earliest, and NaN never wins.
#[derive(Debug, Clone, Default)]
pub struct CheckpointTracker<S> {
    best: Option<(usize, f64, S)>,
}

impl<S: Clone> CheckpointTracker<S> {
    pub fn new() -> Self {
        Self { best: None }
    }

    /// Record one observation; returns true when it became the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: &S) -> bool {
        let better = match &self.best {
            None => !loss.is_nan(),
            Some((_, best_loss, _)) => loss < *best_loss,
        };
        if better {
            self.best = Some((epoch, loss, snapshot.clone()));
        }
        better
    }

    pub fn best(&self) -> Option<(usize, f64, &S)> {
        self.best.as_ref().map(|(e, l, s)| (*e, *l, s))
    }
}

/// Result of a full fit: final parameters, the best-validation checkpoint,
/// and the metric log.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub final_snapshot: Snapshot,
    pub best_snapshot: Snapshot,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub log: MetricLog,
}

/// Raw-loss evaluation of the current parameters on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub raw_losses: Vec<f64>,
    pub sum: f64,
    pub accuracies: Vec<Option<f64>>,
}

/// A full training run's mutable state: backbone, heads, rotations, the
/// combiner, per-group optimizers, and the step counter.
#[derive(Debug)]
pub struct TrainState {
    config: TrainConfig,
    backbone: Mlp,
    heads: Vec<Head>,
    rotations: Option<RotationSet>,
    combiner: CombinerState,
    normalizer: LossNormalizer,
    backbone_opt: Optimizer,
    head_opts: Vec<Optimizer>,
    rotation_opts: Vec<Optimizer>,
    step: u64,
    epoch: usize,
    warnings: Vec<String>,
    events: Option<Vec<StepEvent>>,
}

impl TrainState {
    /// Build a state over an existing backbone and heads. Fails on invalid
    /// config; soft schedule warnings are kept on [`TrainState::warnings`].
    pub fn new(config: TrainConfig, backbone: Mlp, heads: Vec<Head>) -> Result<Self, TrainError> {
        if heads.is_empty() {
            return Err(TrainError::Config("need at least one task head".into()));
        }
        let feature_dim = backbone
            .output_dim()
            .or_else(|| heads.iter().find_map(|h| h.net.input_dim()));
        let warnings = config.validate(feature_dim)?;
        let num_tasks = heads.len();
        let rotations = if config.rotations_enabled {
            let d = feature_dim.ok_or_else(|| {
                TrainError::Config("rotations need a known feature width".into())
            })?;
            let m = config.subspace.unwrap_or(d);
            Some(RotationSet::identity(num_tasks, m)?)
        } else {
            None
        };
        let mut combiner_rng = ChaCha8Rng::seed_from_u64(config.seed);
        combiner_rng.set_stream(2);
        let combiner = CombinerState::new(config.combiner.into(), num_tasks, combiner_rng)?;
        let backbone_opt = Optimizer::new(config.network.optimizer);
        let head_opts = (0..num_tasks).map(|_| Optimizer::new(config.network.optimizer)).collect();
        let rotation_opts = (0..num_tasks).map(|_| Optimizer::new(config.rotation.optimizer)).collect();
        let normalizer = LossNormalizer::new(config.normalize_losses);
        Ok(Self {
            config,
            backbone,
            heads,
            rotations,
            combiner,
            normalizer,
            backbone_opt,
            head_opts,
            rotation_opts,
            step: 0,
            epoch: 0,
            warnings,
            events: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn rotations(&self) -> Option<&RotationSet> {
        self.rotations.as_ref()
    }

    pub fn rotations_mut(&mut self) -> Option<&mut RotationSet> {
        self.rotations.as_mut()
    }

    pub fn combiner(&self) -> &CombinerState {
        &self.combiner
    }

    pub fn normalizer(&self) -> &LossNormalizer {
        &self.normalizer
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Soft warnings from config validation (leader/follower schedule).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Switch step-event instrumentation on or off.
    pub fn record_events(&mut self, on: bool) {
        self.events = if on { Some(Vec::new()) } else { None };
    }

    /// Drain the recorded events.
    pub fn take_events(&mut self) -> Vec<StepEvent> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, e: StepEvent) {
        if let Some(buf) = self.events.as_mut() {
            buf.push(e);
        }
    }

    /// Copy the current parameters.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            backbone: self.backbone.clone(),
            head_nets: self.heads.iter().map(|h| h.net.clone()).collect(),
            skews: match &self.rotations {
                Some(r) => (0..r.num_tasks()).map(|k| r.skew(k).expect("valid index").clone()).collect(),
                None => Vec::new(),
            },
        }
    }

    /// Restore parameters from a snapshot (optimizer moments are untouched).
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), TrainError> {
        if snapshot.head_nets.len() != self.heads.len() {
            return Err(TrainError::Config(format!(
                "snapshot has {} heads, state has {}",
                snapshot.head_nets.len(),
                self.heads.len()
            )));
        }
        self.backbone = snapshot.backbone.clone();
        for (head, net) in self.heads.iter_mut().zip(&snapshot.head_nets) {
            head.net = net.clone();
        }
        if let Some(rots) = self.rotations.as_mut() {
            for (k, skew) in snapshot.skews.iter().enumerate() {
                rots.set_skew(k, skew.clone())?;
            }
        }
        Ok(())
    }

    /// Execute one full training step on `batch` and report its metrics.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord, TrainError> {
        let k_tasks = self.heads.len();
        if batch.labels.len() != k_tasks {
            return Err(TrainError::LabelCount { expected: k_tasks, got: batch.labels.len() });
        }
        if batch.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let t = self.step;
        let lr_net = schedule(self.config.network.lr, self.config.network.decay, t);
        let lr_rot = schedule(self.config.rotation.lr, self.config.rotation.decay, t);
        let scale_only = matches!(self.combiner.kind(), CombinerKind::ScaleOnly);
        let rotations_on = self.rotations.is_some();
        let need_units = scale_only || rotations_on;

        self.emit(StepEvent::ForwardShared);
        let tape = self.backbone.forward(&batch.x)?;
        let z = tape.output();

        // per-task forward/backward through the (rotated) heads
        let mut raw_losses = vec![0.0; k_tasks];
        let mut g_rotated: Vec<DenseMatrix> = Vec::with_capacity(k_tasks);
        let mut head_grads: Vec<NetGrads> = Vec::with_capacity(k_tasks);
        for k in 0..k_tasks {
            let eval = match self.rotations.as_mut() {
                Some(rots) => {
                    let features = rots.apply(z, k)?;
                    self.heads[k].evaluate(&features, &batch.labels[k])?
                }
                None => self.heads[k].evaluate(z, &batch.labels[k])?,
            };
            raw_losses[k] = eval.loss;
            g_rotated.push(eval.feature_grad);
            head_grads.push(eval.param_grads);
        }

        let mut notes = Vec::new();
        let losses = self.normalizer.apply(t, &raw_losses, &mut notes);
        for (k, loss) in losses.iter().enumerate() {
            if !loss.is_finite() || *loss > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged { task: k, loss: *loss, step: t });
            }
        }
        if self.normalizer.enabled() {
            for k in 0..k_tasks {
                let inv = 1.0 / self.normalizer.constant(k);
                g_rotated[k].scale(inv);
                scale_net_grads(&mut head_grads[k], inv);
            }
        }

        // pull gradients back to shared-feature space; unit gradients
        let mut feature_grads: Vec<DenseMatrix> = Vec::with_capacity(k_tasks);
        let mut units: Vec<DenseMatrix> = Vec::new();
        for k in 0..k_tasks {
            self.emit(StepEvent::TaskLoss(k));
            let g = match self.rotations.as_mut() {
                Some(rots) => rots.pull_back(&g_rotated[k], k)?,
                // the rotated-space gradient IS the feature gradient here;
                // move it out to keep the no-rotation path copy-free
                None => std::mem::replace(&mut g_rotated[k], DenseMatrix::zeros(0, 0)),
            };
            self.emit(StepEvent::FeatureGrad(k));
            if rotations_on {
                self.emit(StepEvent::RotatedGrad(k));
            }
            if need_units {
                let norm = g.frob_norm();
                let mut unit = g.clone();
                if norm > ZERO_NORM_EPS {
                    unit.scale(1.0 / norm);
                } else {
                    unit = DenseMatrix::zeros(g.rows(), g.cols());
                    notes.push(format!("task {k}: zero gradient, unit direction dropped"));
                }
                units.push(unit);
                self.emit(StepEvent::UnitGrad(k));
            }
            if scale_only {
                self.emit(StepEvent::RelativeConvergence(k));
            }
            feature_grads.push(g);
        }

        let combined = self.combiner.combine(&feature_grads, &losses, lr_rot)?;
        if scale_only {
            self.emit(StepEvent::AlphaNormalized);
            self.emit(StepEvent::SharedMagnitude);
        } else {
            self.emit(StepEvent::CombinerMerge);
        }

        // backbone update from the merged feature gradient
        let (_, backbone_grads) = self.backbone.backward(&tape, &combined.combined)?;
        apply_net_update(&mut self.backbone_opt, &mut self.backbone, &backbone_grads, lr_net);
        self.emit(StepEvent::BackboneUpdate);

        // rotation updates toward the mean unit direction, then head updates
        let mut rotation_losses = None;
        if rotations_on {
            let m = self.rotations.as_ref().expect("rotations on").subspace();
            let unit_blocks: Vec<DenseMatrix> = units.iter().map(|u| leading_block(u, m)).collect();
            let block_refs: Vec<&DenseMatrix> = unit_blocks.iter().collect();
            let target = make_target(&block_refs)?;
            self.emit(StepEvent::TargetVector);
            let mut rot_losses = Vec::with_capacity(k_tasks);
            for k in 0..k_tasks {
                let g_block = leading_block(&g_rotated[k], m);
                let rots = self.rotations.as_mut().expect("rotations on");
                let loss_k = rots.rotation_loss(k, &g_block, &target)?;
                self.emit(StepEvent::RotationLoss(k));
                let skew_grad = self
                    .rotations
                    .as_ref()
                    .expect("rotations on")
                    .rotation_loss_grad(k, &g_block, &target)?;
                let opt = &mut self.rotation_opts[k];
                opt.begin_step();
                self.rotations
                    .as_mut()
                    .expect("rotations on")
                    .update_skew(k, |params| opt.update(0, lr_rot, params, &skew_grad))?;
                self.emit(StepEvent::RotationUpdate(k));
                apply_net_update(&mut self.head_opts[k], &mut self.heads[k].net, &head_grads[k], lr_net);
                self.emit(StepEvent::HeadUpdate(k));
                rot_losses.push(loss_k);
            }
            rotation_losses = Some(rot_losses);
        } else {
            for k in 0..k_tasks {
                apply_net_update(&mut self.head_opts[k], &mut self.heads[k].net, &head_grads[k], lr_net);
                self.emit(StepEvent::HeadUpdate(k));
            }
        }

        notes.extend(combined.diagnostics.notes.iter().cloned());
        let record = StepRecord {
            step: t,
            epoch: self.epoch,
            raw_losses,
            losses,
            task_norms: combined.diagnostics.task_norms,
            weights: combined.weights,
            scale: combined.scale,
            alphas: combined.alphas,
            pairwise_cos: combined.diagnostics.pairwise_cos,
            update_task_cos: combined.diagnostics.update_task_cos,
            rotation_losses,
            lr_network: lr_net,
            lr_rotation: lr_rot,
            notes,
        };
        self.step += 1;
        Ok(record)
    }

    /// Raw losses (and accuracies where defined) of the current parameters.
    pub fn evaluate(&mut self, batch: &Batch) -> Result<EvalReport, TrainError> {
        let k_tasks = self.heads.len();
        if batch.labels.len() != k_tasks {
            return Err(TrainError::LabelCount { expected: k_tasks, got: batch.labels.len() });
        }
        if batch.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let tape = self.backbone.forward(&batch.x)?;
        let z = tape.output();
        let mut raw_losses = Vec::with_capacity(k_tasks);
        let mut accuracies = Vec::with_capacity(k_tasks);
        for k in 0..k_tasks {
            let features = match self.rotations.as_mut() {
                Some(rots) => rots.apply(z, k)?,
                None => z.clone(),
            };
            raw_losses.push(self.heads[k].loss_only(&features, &batch.labels[k])?);
            accuracies.push(head_accuracy(&self.heads[k], &features, &batch.labels[k])?);
        }
        let sum = raw_losses.iter().sum();
        Ok(EvalReport { raw_losses, sum, accuracies })
    }

    /// Train for the configured number of epochs, evaluating on
    /// `validation` (the training batch itself when absent) after each
    /// epoch and checkpointing the smallest raw summed validation loss.
    /// Zero configured epochs return the initial parameters as both final
    /// and best.
    pub fn fit(&mut self, train: &Batch, validation: Option<&Batch>) -> Result<FitOutcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let val_batch = validation.unwrap_or(train);
        let mut tracker: CheckpointTracker<Snapshot> = CheckpointTracker::new();
        let mut log = MetricLog::default();

        if self.config.epochs == 0 {
            let snapshot = self.snapshot();
            let eval = self.evaluate(val_batch)?;
            tracker.observe(0, eval.sum, &snapshot);
            let (best_epoch, best_validation, best) = tracker.best().expect("observed once");
            return Ok(FitOutcome {
                final_snapshot: snapshot.clone(),
                best_snapshot: best.clone(),
                best_epoch,
                best_validation,
                log,
            });
        }

        let batch_size = self.config.batch_size.min(train.len()).max(1);
        for epoch in 0..self.config.epochs {
            self.epoch = epoch;
            let mut loss_accum = 0.0;
            let mut steps_this_epoch = 0usize;
            let mut start = 0usize;
            while start < train.len() {
                let end = (start + batch_size).min(train.len());
                let chunk = slice_batch(train, start, end);
                let record = self.train_step(&chunk)?;
                loss_accum += record.losses.iter().sum::<f64>();
                steps_this_epoch += 1;
                log.steps.push(record);
                start = end;
            }
            let eval = self.evaluate(val_batch)?;
            let snapshot = self.snapshot();
            let is_best = tracker.observe(epoch, eval.sum, &snapshot);
            log.epochs.push(EpochRecord {
                epoch,
                mean_step_loss: loss_accum / steps_this_epoch.max(1) as f64,
                validation_losses: eval.raw_losses,
                validation_sum: eval.sum,
                accuracies: eval.accuracies,
                is_best,
            });
        }
        let final_snapshot = self.snapshot();
        let (best_epoch, best_validation, best) = tracker.best().ok_or_else(|| {
            TrainError::Config("no checkpoint observed: validation loss was NaN every epoch".into())
        })?;
        Ok(FitOutcome {
            final_snapshot,
            best_snapshot: best.clone(),
            best_epoch,
            best_validation,
            log,
        })
    }
}

fn scale_net_grads(grads: &mut NetGrads, s: f64) {
    for layer in &mut grads.layers {
        layer.weight.scale(s);
        for b in layer.bias.as_mut_slice() {
            *b *= s;
        }
    }
}

fn net_grad_tensor(grads: &NetGrads, idx: usize) -> &[f64] {
    let layer = &grads.layers[idx / 2];
    if idx % 2 == 0 {
        layer.weight.data()
    } else {
        layer.bias.as_slice()
    }
}

/// One optimizer step over every tensor of a network.
fn apply_net_update(opt: &mut Optimizer, net: &mut Mlp, grads: &NetGrads, lr: f64) {
    if net.tensor_count() == 0 {
        return;
    }
    opt.begin_step();
    net.visit_params_mut(|idx, params| {
        opt.update(idx, lr, params, net_grad_tensor(grads, idx));
    });
}

/// Copy of the first `width` columns.
fn leading_block(m: &DenseMatrix, width: usize) -> DenseMatrix {
    if m.cols() == width {
        return m.clone();
    }
    DenseMatrix::from_fn(m.rows(), width, |i, j| m.get(i, j))
}

/// Row range `[start, end)` of a batch.
fn slice_batch(batch: &Batch, start: usize, end: usize) -> Batch {
    if start == 0 && end == batch.len() {
        return batch.clone();
    }
    let x = DenseMatrix::from_fn(end - start, batch.x.cols(), |i, j| batch.x.get(start + i, j));
    let labels = batch
        .labels
        .iter()
        .map(|l| DenseMatrix::from_fn(end - start, l.cols(), |i, j| l.get(start + i, j)))
        .collect();
    Batch { x, labels }
}

/// Classification accuracy for heads whose loss defines one: fraction of
/// rows where the thresholded logit (binary) or arg-max logit (multiclass)
/// matches the label. `None` for regression/analytic heads.
fn head_accuracy(head: &Head, features: &DenseMatrix, labels: &DenseMatrix) -> Result<Option<f64>, NetError> {
    match head.loss {
        LossKind::LogisticBce => {
            let pred = head.predict(features)?;
            let mut correct = 0usize;
            for n in 0..pred.rows() {
                let positive = pred.get(n, 0) > 0.0;
                let label_positive = labels.get(n, 0) > 0.5;
                if positive == label_positive {
                    correct += 1;
                }
            }
            Ok(Some(correct as f64 / pred.rows() as f64))
        }
        LossKind::NllLogSoftmax => {
            let pred = head.predict(features)?;
            let mut correct = 0usize;
            for n in 0..pred.rows() {
                let mut arg_max = 0;
                for c in 1..pred.cols() {
                    if pred.get(n, c) > pred.get(n, arg_max) {
                        arg_max = c;
                    }
                }
                if arg_max as f64 == labels.get(n, 0) {
                    correct += 1;
                }
            }
            Ok(Some(correct as f64 / pred.rows() as f64))
        }
        _ => Ok(None),
    }
}
