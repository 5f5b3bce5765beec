//! Experiment configuration: a single TOML file describing the task family,
//! the model, the training schedule, the gradient combiner, optional
//! single-task baselines, and an optional sweep grid.
//!
//! Errors point at the offending line of the file so a bad value can be
//! found without reading the whole config.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use taskgrad::net::{Head, LossKind, Mlp};
use taskgrad::tasks::{self, AvocadoLoss, NonconvexLoss, TaskData, TaskKind, TaskSpec};
use taskgrad::train::{
    CombinerKindConfig, GroupConfig, OptimizerKind, TrainConfig, TrainState,
};
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Configuration loading and validation failures. `Missing` maps to exit
/// code 2; the others are also config-usage errors.
#[derive(Debug)]
pub enum ConfigError {
    Missing(PathBuf),
    /// Parse error; the TOML reporter already includes line/column.
    Parse { path: PathBuf, message: String },
    /// Semantic error anchored to a config line.
    Invalid { path: PathBuf, line: usize, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Missing(p) => write!(f, "config file not found: {}", p.display()),
            ConfigError::Parse { path, message } => {
                write!(f, "{}: {message}", path.display())
            }
            ConfigError::Invalid { path, line, message } => {
                write!(f, "{}:{line}: {message}", path.display())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    experiment: ExperimentSection,
    task: TaskSection,
    model: ModelSection,
    train: TrainSection,
    combiner: CombinerKindConfig,
    baselines: Option<BaselinesSection>,
    sweep: Option<SweepSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    name: String,
    /// Seeds to run (overridden by `--seed`); defaults to the train seed.
    #[serde(default)]
    seeds: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSection {
    kind: TaskKind,
    num_tasks: Option<usize>,
    #[serde(default)]
    shifts: Vec<f64>,
    samples: Option<usize>,
    input_dim: Option<usize>,
    noise: Option<f64>,
    flip_prob: Option<f64>,
}

/// Network shape: backbone hidden widths, shared-feature width, and head
/// hidden widths (closed-form families use identity heads regardless).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    epochs: usize,
    /// Defaults to full-batch training.
    batch_size: Option<usize>,
    network: GroupSection,
    rotation: GroupSection,
    #[serde(default)]
    rotations: bool,
    subspace: Option<usize>,
    #[serde(default)]
    normalize_losses: bool,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupSection {
    lr: f64,
    #[serde(default = "default_decay")]
    decay: f64,
    /// Defaults to plain SGD for the network group and the adaptive rule
    /// for the rotation group.
    optimizer: Option<OptimizerKind>,
}

fn default_decay() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselinesSection {
    /// Single-task reference metric per task.
    values: Vec<f64>,
    #[serde(default = "default_true")]
    lower_is_better: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Seeds the grid is replicated over; defaults to the experiment seeds.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub axes: Vec<AxisSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub param: AxisParam,
    pub values: Vec<f64>,
}

/// Hyperparameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisParam {
    NetworkLr,
    RotationLr,
    NetworkDecay,
    RotationDecay,
    BatchSize,
    Epochs,
}

impl AxisParam {
    pub fn name(self) -> &'static str {
        match self {
            AxisParam::NetworkLr => "network_lr",
            AxisParam::RotationLr => "rotation_lr",
            AxisParam::NetworkDecay => "network_decay",
            AxisParam::RotationDecay => "rotation_decay",
            AxisParam::BatchSize => "batch_size",
            AxisParam::Epochs => "epochs",
        }
    }

    /// Apply one grid value to a training configuration.
    pub fn apply(self, config: &mut TrainConfig, value: f64) {
        match self {
            AxisParam::NetworkLr => config.network.lr = value,
            AxisParam::RotationLr => config.rotation.lr = value,
            AxisParam::NetworkDecay => config.network.decay = value,
            AxisParam::RotationDecay => config.rotation.decay = value,
            AxisParam::BatchSize => config.batch_size = value as usize,
            AxisParam::Epochs => config.epochs = value as usize,
        }
    }
}

/// A fully validated experiment, ready to instantiate per seed.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub name: String,
    pub spec: TaskSpec,
    pub train: TrainConfig,
    pub model: ModelSection,
    /// Single-task baselines `(values, lower_is_better)` for the
    /// improvement report.
    pub baselines: Option<(Vec<f64>, bool)>,
    pub sweep: Option<SweepSection>,
    pub seeds: Vec<u64>,
}

/// First 1-based line whose text mentions `key`, to anchor semantic errors.
fn anchor(raw: &str, key: &str) -> usize {
    raw.lines()
        .position(|l| l.contains(key))
        .map(|i| i + 1)
        .unwrap_or(1)
}

/// Read, parse, and validate a config file.
pub fn load(path: &Path) -> Result<RunPlan, ConfigError> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ConfigError::Missing(path.to_path_buf()))
        }
        Err(e) => {
            return Err(ConfigError::Parse {
                path: path.to_path_buf(),
                message: format!("cannot read config: {e}"),
            })
        }
    };
    let file: ExperimentFile = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let invalid = |key: &str, message: String| ConfigError::Invalid {
        path: path.to_path_buf(),
        line: anchor(&raw, key),
        message,
    };

    // --- task spec -------------------------------------------------------
    let t = &file.task;
    let (num_tasks, samples, input_dim, noise, flip_prob) = match t.kind {
        TaskKind::Avocado | TaskKind::Nonconvex => {
            if t.shifts.is_empty() {
                return Err(invalid("kind", "closed-form task families need a non-empty `shifts` list".into()));
            }
            (
                t.num_tasks.unwrap_or(t.shifts.len()),
                t.samples.unwrap_or(1),
                t.input_dim.unwrap_or(2),
                t.noise.unwrap_or(0.0),
                t.flip_prob.unwrap_or(0.0),
            )
        }
        TaskKind::OppositeLogistic => (
            t.num_tasks.unwrap_or(2),
            t.samples.unwrap_or(1000),
            t.input_dim.unwrap_or(2),
            t.noise.unwrap_or(0.0),
            t.flip_prob.unwrap_or(0.05),
        ),
        TaskKind::GaussianMultitask => (
            t.num_tasks.ok_or_else(|| {
                invalid("kind", "gaussian_multitask needs an explicit `num_tasks`".into())
            })?,
            t.samples.unwrap_or(1000),
            t.input_dim.unwrap_or(2),
            t.noise.unwrap_or(0.1),
            t.flip_prob.unwrap_or(0.05),
        ),
    };
    let seed = file.train.seed.unwrap_or(0);
    let spec = TaskSpec {
        kind: t.kind,
        num_tasks,
        shifts: t.shifts.clone(),
        samples,
        input_dim,
        noise,
        flip_prob,
        seed,
    };
    spec.validate().map_err(|e| invalid("[task]", e.to_string()))?;

    // --- model -----------------------------------------------------------
    if file.model.feature_dim == 0 {
        return Err(invalid("feature_dim", "feature_dim must be >= 1".into()));
    }
    if matches!(t.kind, TaskKind::Avocado | TaskKind::Nonconvex) && file.model.feature_dim != 2 {
        return Err(invalid(
            "feature_dim",
            format!(
                "the closed-form plane families score a 2-D feature; feature_dim {} is not 2",
                file.model.feature_dim
            ),
        ));
    }

    // --- train config ----------------------------------------------------
    let tr = &file.train;
    let network = GroupConfig {
        lr: tr.network.lr,
        decay: tr.network.decay,
        optimizer: tr.network.optimizer.unwrap_or_else(OptimizerKind::sgd),
    };
    let rotation = GroupConfig {
        lr: tr.rotation.lr,
        decay: tr.rotation.decay,
        optimizer: tr.rotation.optimizer.unwrap_or_else(OptimizerKind::adaptive),
    };
    let train = TrainConfig {
        epochs: tr.epochs,
        batch_size: tr.batch_size.unwrap_or(usize::MAX),
        network,
        rotation,
        combiner: file.combiner,
        rotations_enabled: tr.rotations,
        subspace: tr.subspace,
        normalize_losses: tr.normalize_losses,
        seed,
    };
    train
        .validate(Some(file.model.feature_dim))
        .map_err(|e| invalid("[train]", e.to_string()))?;

    // --- baselines -------------------------------------------------------
    let baselines = match &file.baselines {
        Some(b) => {
            if b.values.len() != num_tasks {
                return Err(invalid(
                    "values",
                    format!("baselines list has {} entries for {} tasks", b.values.len(), num_tasks),
                ));
            }
            if b.values.iter().any(|v| *v == 0.0) {
                return Err(invalid("values", "baseline values must be nonzero".into()));
            }
            Some((b.values.clone(), b.lower_is_better))
        }
        None => None,
    };

    // --- sweep -----------------------------------------------------------
    if let Some(sweep) = &file.sweep {
        if sweep.axes.is_empty() {
            return Err(invalid("[sweep]", "sweep declares no axes: the grid is empty".into()));
        }
        if let Some(axis) = sweep.axes.iter().find(|a| a.values.is_empty()) {
            return Err(invalid(
                "axes",
                format!("sweep axis `{}` has no values: the grid is empty", axis.param.name()),
            ));
        }
    }

    let seeds = if file.experiment.seeds.is_empty() {
        vec![seed]
    } else {
        file.experiment.seeds.clone()
    };
    Ok(RunPlan {
        name: file.experiment.name,
        spec,
        train,
        model: file.model.clone(),
        baselines,
        sweep: file.sweep,
        seeds,
    })
}

/// Instantiate data, backbone, and heads, and assemble a training state for
/// one seed. The backbone and heads draw from the seed's init stream in a
/// fixed order, so equal seeds give identical initializations.
pub fn build_state(plan: &RunPlan, seed: u64) -> anyhow::Result<(TrainState, TaskData)> {
    let mut spec = plan.spec.clone();
    spec.seed = seed;
    let data = tasks::generate(&spec)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let mut backbone_dims = Vec::with_capacity(plan.model.hidden.len() + 2);
    backbone_dims.push(spec.input_dim);
    backbone_dims.extend_from_slice(&plan.model.hidden);
    backbone_dims.push(plan.model.feature_dim);
    let backbone = Mlp::seeded(&backbone_dims, &mut init_rng)?;

    let mut head_dims = Vec::with_capacity(plan.model.head_hidden.len() + 2);
    head_dims.push(plan.model.feature_dim);
    head_dims.extend_from_slice(&plan.model.head_hidden);
    head_dims.push(1);
    let heads: Vec<Head> = match spec.kind {
        TaskKind::Avocado => spec
            .shifts
            .iter()
            .map(|&shift| Head::new(Mlp::identity(), LossKind::Custom(Arc::new(AvocadoLoss { shift }))))
            .collect(),
        TaskKind::Nonconvex => spec
            .shifts
            .iter()
            .map(|&shift| Head::new(Mlp::identity(), LossKind::Custom(Arc::new(NonconvexLoss { shift }))))
            .collect(),
        TaskKind::OppositeLogistic => (0..spec.num_tasks)
            .map(|_| Ok(Head::new(Mlp::seeded(&head_dims, &mut init_rng)?, LossKind::LogisticBce)))
            .collect::<anyhow::Result<_>>()?,
        TaskKind::GaussianMultitask => (0..spec.num_tasks)
            .map(|k| {
                let loss = if k < 2 { LossKind::LogisticBce } else { LossKind::SquaredError };
                Ok(Head::new(Mlp::seeded(&head_dims, &mut init_rng)?, loss))
            })
            .collect::<anyhow::Result<_>>()?,
    };

    let mut config = plan.train.clone();
    config.seed = seed;
    let state = TrainState::new(config, backbone, heads)?;
    Ok((state, data))
}
