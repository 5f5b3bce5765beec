//! Gradient combination and feature-rotation toolkit for multitask training.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`] — dense row-major containers plus the matrix-exponential
//!   machinery (value, Fréchet derivative, and pullback onto skew parameters)
//!   that powers the rotation layer.
//! * [`net`] — a minimal multilayer perceptron with explicit reverse-mode
//!   backprop: a shared backbone producing a feature batch, and per-task
//!   heads producing losses and per-sample feature gradients.
//! * [`rotation`] — per-task special-orthogonal rotations of the shared
//!   feature, parametrized through the exponential map, plus the alignment
//!   loss that steers each rotation toward the mean task direction.
//! * [`combine`] — strategies that merge per-task feature gradients into a
//!   single backbone update: plain summation, magnitude equalization, and
//!   five baselines from the multitask literature, plus a sufficient-descent
//!   certificate.
//! * [`tasks`] — deterministic synthetic task generators used by the test
//!   suites and the demo experiments.
//! * [`train`] — the joint training loop tying everything together, with
//!   per-group optimizers, learning-rate schedules, loss normalization,
//!   checkpointing, and step-level instrumentation.
//! * [`metrics`] — relative-improvement scores, cosine traces, and a paired
//!   one-sided t-test with an in-crate Student-t tail.
//!
//! All randomness flows through explicitly seeded ChaCha streams; equal seeds
//! give bit-identical runs.

pub mod combine;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod rotation;
pub mod tasks;
pub mod train;

pub use combine::{CombineDiagnostics, CombineResult, CombinerKind, CombinerState, Prop1Certificate};
pub use linalg::{DenseMatrix, DenseVector, LinalgError, SkewParam};
pub use metrics::{ImprovementReport, TTestOutcome};
pub use net::{Activation, ForwardTape, Head, LossKind, Mlp, TaskGradientBatch};
pub use rotation::{RotationSet, TargetVector};
pub use tasks::{Batch, TaskData, TaskSpec};
pub use train::{FitOutcome, MetricLog, StepRecord, TrainConfig, TrainError, TrainState};
