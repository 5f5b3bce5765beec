//! Minimal multilayer perceptron with explicit reverse-mode backprop.
//!
//! A shared [`Mlp`] backbone maps an input batch to a feature batch; each
//! task owns a [`Head`] (another, possibly empty, `Mlp` plus a loss) that
//! maps features to a scalar loss and to per-sample feature gradients.
//! Losses reduce over the batch by summation; mean reduction is an explicit
//! opt-in flag. Forward passes record a [`ForwardTape`] tied to the
//! parameter version that produced it, and backprop rejects stale tapes.
//!
//! Weight initialization draws every coefficient of a layer uniformly from
//! `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` from a caller-supplied seeded RNG,
//! so equal seeds give bit-identical parameters.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector, LinalgError};

/// Per-task gradient of the batch loss with respect to a feature batch:
/// row `n` is the gradient contributed by sample `n`.
pub type TaskGradientBatch = DenseMatrix;

/// Errors produced by forward/backward passes and constructors.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer} expects input width {expected}, previous layer produces {got}")]
    LayerChain { layer: usize, expected: usize, got: usize },
    #[error("input has width {got}, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("labels are {got_rows}x{got_cols}, expected {rows}x{cols}")]
    LabelShape { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("upstream gradient is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    UpstreamShape { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("stale tape: parameters are at version {net}, tape was recorded at version {tape}")]
    StaleTape { net: u64, tape: u64 },
    #[error("row {row}: class label {got} out of range for {classes} classes")]
    ClassIndex { row: usize, got: f64, classes: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Elementwise activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Activation::Linear => v,
        }
    }

    /// Derivative at a pre-activation value. The kink of `relu` at exactly
    /// zero uses the subgradient 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer: `out = act(weight · x + bias)`, weight is `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Layer {
    /// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` for weights
    /// (row-major draw order) and then biases.
    pub fn seeded(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = DenseMatrix::from_fn(fan_out, fan_in, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound);
        let mut bias = DenseVector::zeros(fan_out);
        for b in bias.as_mut_slice() {
            *b = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
        Self { weight, bias, activation }
    }

    fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Gradients for every parameter tensor of an [`Mlp`], in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

/// Gradient of one layer's weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

impl NetGrads {
    /// Zero gradients shaped like `net`.
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: DenseVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// `self += s * rhs` over every tensor.
    pub fn add_scaled(&mut self, rhs: &NetGrads, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&rhs.layers) {
            a.weight.add_scaled(&b.weight, s).expect("gradient shapes match");
            for (x, y) in a.bias.as_mut_slice().iter_mut().zip(b.bias.as_slice()) {
                *x += s * y;
            }
        }
    }
}

/// Feedforward stack of [`Layer`]s. An empty stack is the identity map,
/// used for heads that attach a loss directly to the (rotated) feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped on every parameter mutation; tapes remember the version they
    /// were recorded against so stale backprop is rejected.
    version: u64,
}

/// Cached intermediates of one forward pass: the input seen by each layer
/// and each layer's pre-activation, plus the final output.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    version: u64,
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

impl ForwardTape {
    pub fn output(&self) -> &DenseMatrix {
        &self.output
    }
}

impl Mlp {
    /// Identity network (no layers, no parameters).
    pub fn identity() -> Self {
        Self { layers: Vec::new(), version: 0 }
    }

    /// Validate layer chaining and wrap the stack.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetError> {
        for w in 1..layers.len() {
            if layers[w].fan_in() != layers[w - 1].fan_out() {
                return Err(NetError::LayerChain {
                    layer: w,
                    expected: layers[w].fan_in(),
                    got: layers[w - 1].fan_out(),
                });
            }
        }
        Ok(Self { layers, version: 0 })
    }

    /// Fully-connected stack over `dims = [in, h_1, .., out]` with `relu`
    /// on hidden layers and a linear output layer.
    pub fn seeded(dims: &[usize], rng: &mut impl Rng) -> Result<Self, NetError> {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in 0..dims.len() - 1 {
            let act = if w + 2 == dims.len() { Activation::Linear } else { Activation::Relu };
            layers.push(Layer::seeded(dims[w], dims[w + 1], act, rng));
        }
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Width accepted by the first layer; `None` for the identity network.
    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Layer::fan_in)
    }

    /// Width produced by the last layer; `None` for the identity network.
    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Layer::fan_out)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Visit every parameter tensor mutably (per layer: weight then bias)
    /// and bump the parameter version. Tensor indices are stable, so
    /// optimizer moment buffers can be paired positionally.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut idx = 0;
        for layer in &mut self.layers {
            f(idx, layer.weight.data_mut());
            idx += 1;
            f(idx, layer.bias.as_mut_slice());
            idx += 1;
        }
        self.version += 1;
    }

    /// Number of parameter tensors (two per layer).
    pub fn tensor_count(&self) -> usize {
        self.layers.len() * 2
    }

    /// Run the batch `x` (one sample per row) through the stack, recording
    /// a tape for backprop.
    pub fn forward(&self, x: &DenseMatrix) -> Result<ForwardTape, NetError> {
        if let Some(expected) = self.input_dim() {
            if x.cols() != expected {
                return Err(NetError::InputWidth { expected, got: x.cols() });
            }
        }
        let batch = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let out_w = layer.fan_out();
            let in_w = layer.fan_in();
            let mut pre = DenseMatrix::zeros(batch, out_w);
            for n in 0..batch {
                let row = current.row(n);
                for i in 0..out_w {
                    let mut acc = layer.bias.as_slice()[i];
                    for j in 0..in_w {
                        acc += layer.weight.get(i, j) * row[j];
                    }
                    pre.set(n, i, acc);
                }
            }
            let mut post = pre.clone();
            for v in post.data_mut() {
                *v = layer.activation.apply(*v);
            }
            inputs.push(current);
            pres.push(pre);
            current = post;
        }
        Ok(ForwardTape { version: self.version, inputs, pre: pres, output: current })
    }

    /// Reverse-mode pass: given `upstream = dL/d(output)`, return
    /// `(dL/d(input), dL/d(params))`. Exact chain rule; rejects tapes from a
    /// different parameter version.
    pub fn backward(&self, tape: &ForwardTape, upstream: &DenseMatrix) -> Result<(DenseMatrix, NetGrads), NetError> {
        if tape.version != self.version {
            return Err(NetError::StaleTape { net: self.version, tape: tape.version });
        }
        if upstream.rows() != tape.output.rows() || upstream.cols() != tape.output.cols() {
            return Err(NetError::UpstreamShape {
                rows: tape.output.rows(),
                cols: tape.output.cols(),
                got_rows: upstream.rows(),
                got_cols: upstream.cols(),
            });
        }
        let batch = upstream.rows();
        let mut grads = NetGrads::zeros_like(self);
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let out_w = layer.fan_out();
            let in_w = layer.fan_in();
            let pre = &tape.pre[l];
            let input = &tape.inputs[l];
            // through the activation
            let mut dpre = delta;
            for n in 0..batch {
                for i in 0..out_w {
                    let v = dpre.get(n, i) * layer.activation.derivative(pre.get(n, i));
                    dpre.set(n, i, v);
                }
            }
            // parameter gradients
            let lg = &mut grads.layers[l];
            for i in 0..out_w {
                for j in 0..in_w {
                    let mut acc = 0.0;
                    for n in 0..batch {
                        acc += dpre.get(n, i) * input.get(n, j);
                    }
                    lg.weight.set(i, j, acc);
                }
                let mut acc = 0.0;
                for n in 0..batch {
                    acc += dpre.get(n, i);
                }
                lg.bias.as_mut_slice()[i] = acc;
            }
            // gradient w.r.t. the layer input
            let mut dinput = DenseMatrix::zeros(batch, in_w);
            for n in 0..batch {
                for j in 0..in_w {
                    let mut acc = 0.0;
                    for i in 0..out_w {
                        acc += dpre.get(n, i) * layer.weight.get(i, j);
                    }
                    dinput.set(n, j, acc);
                }
            }
            delta = dinput;
        }
        Ok((delta, grads))
    }
}

/// A loss with caller-supplied analytic value and gradient, evaluated per
/// sample on the head output (labels are ignored). Used by the synthetic
/// test functions, which are their own loss.
pub trait AnalyticLoss: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, pred: &[f64]) -> f64;
    /// Write `d(value)/d(pred)` into `out` (same length as `pred`).
    fn grad(&self, pred: &[f64], out: &mut [f64]);
}

/// Loss attached to a head output.
#[derive(Clone)]
pub enum LossKind {
    /// Sum of squared errors, no ½ factor: `Σ (o - y)²`, gradient `2(o - y)`.
    SquaredError,
    /// Binary cross-entropy on logits (sigmoid fused in), labels in {0, 1}.
    LogisticBce,
    /// Negative log-likelihood over log-softmax of the logits; labels hold
    /// one class index per row.
    NllLogSoftmax,
    /// Caller-supplied analytic per-sample loss; labels are ignored.
    Custom(Arc<dyn AnalyticLoss>),
}

impl fmt::Debug for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::SquaredError => f.write_str("SquaredError"),
            LossKind::LogisticBce => f.write_str("LogisticBce"),
            LossKind::NllLogSoftmax => f.write_str("NllLogSoftmax"),
            LossKind::Custom(c) => write!(f, "Custom({})", c.name()),
        }
    }
}

/// One task's head: a (possibly identity) network plus a loss.
#[derive(Debug, Clone)]
pub struct Head {
    pub net: Mlp,
    pub loss: LossKind,
    /// Divide the summed loss (and its gradients) by the batch size.
    /// Off by default: reduction is summation.
    pub mean_reduction: bool,
}

/// Everything one head evaluation produces: the reduced loss, the per-sample
/// gradient with respect to the head's input features, and the gradients of
/// the head's own parameters.
#[derive(Debug, Clone)]
pub struct HeadEval {
    pub loss: f64,
    pub feature_grad: TaskGradientBatch,
    pub param_grads: NetGrads,
}

impl Head {
    pub fn new(net: Mlp, loss: LossKind) -> Self {
        Self { net, loss, mean_reduction: false }
    }

    /// Forward through the head, reduce the loss over the batch, and run the
    /// reverse pass, producing both the feature gradient (row `n` is exactly
    /// the gradient of sample `n`'s loss term) and the head parameter
    /// gradients.
    pub fn evaluate(&self, features: &DenseMatrix, labels: &DenseMatrix) -> Result<HeadEval, NetError> {
        let tape = self.net.forward(features)?;
        let (mut loss, mut dout) = loss_and_output_grad(&self.loss, tape.output(), labels)?;
        if self.mean_reduction && features.rows() > 0 {
            let inv = 1.0 / features.rows() as f64;
            loss *= inv;
            dout.scale(inv);
        }
        let (feature_grad, param_grads) = self.net.backward(&tape, &dout)?;
        Ok(HeadEval { loss, feature_grad, param_grads })
    }

    /// Forward-only loss (used by evaluation loops that never backprop).
    pub fn loss_only(&self, features: &DenseMatrix, labels: &DenseMatrix) -> Result<f64, NetError> {
        let tape = self.net.forward(features)?;
        let (mut loss, _) = loss_and_output_grad(&self.loss, tape.output(), labels)?;
        if self.mean_reduction && features.rows() > 0 {
            loss /= features.rows() as f64;
        }
        Ok(loss)
    }

    /// Raw head outputs (logits / predictions) for metric computation.
    pub fn predict(&self, features: &DenseMatrix) -> Result<DenseMatrix, NetError> {
        Ok(self.net.forward(features)?.output)
    }
}

fn check_label_shape(out: &DenseMatrix, labels: &DenseMatrix, cols: usize) -> Result<(), NetError> {
    if labels.rows() != out.rows() || labels.cols() != cols {
        return Err(NetError::LabelShape {
            rows: out.rows(),
            cols,
            got_rows: labels.rows(),
            got_cols: labels.cols(),
        });
    }
    Ok(())
}

/// Batch-summed loss and its gradient with respect to the outputs.
fn loss_and_output_grad(
    kind: &LossKind,
    out: &DenseMatrix,
    labels: &DenseMatrix,
) -> Result<(f64, DenseMatrix), NetError> {
    let batch = out.rows();
    let width = out.cols();
    let mut grad = DenseMatrix::zeros(batch, width);
    let mut loss = 0.0;
    match kind {
        LossKind::SquaredError => {
            check_label_shape(out, labels, width)?;
            for n in 0..batch {
                for j in 0..width {
                    let diff = out.get(n, j) - labels.get(n, j);
                    loss += diff * diff;
                    grad.set(n, j, 2.0 * diff);
                }
            }
        }
        LossKind::LogisticBce => {
            check_label_shape(out, labels, width)?;
            for n in 0..batch {
                for j in 0..width {
                    let o = out.get(n, j);
                    let y = labels.get(n, j);
                    // stable form of y*softplus(-o) + (1-y)*softplus(o)
                    loss += o.max(0.0) - o * y + (-o.abs()).exp().ln_1p();
                    let sigmoid = 1.0 / (1.0 + (-o).exp());
                    grad.set(n, j, sigmoid - y);
                }
            }
        }
        LossKind::NllLogSoftmax => {
            check_label_shape(out, labels, 1)?;
            for n in 0..batch {
                let row = out.row(n);
                let class = labels.get(n, 0);
                let idx = class as usize;
                if class.fract() != 0.0 || class < 0.0 || idx >= width {
                    return Err(NetError::ClassIndex { row: n, got: class, classes: width });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum_exp.ln();
                loss += lse - row[idx];
                for j in 0..width {
                    let softmax = (row[j] - max).exp() / sum_exp;
                    grad.set(n, j, softmax - if j == idx { 1.0 } else { 0.0 });
                }
            }
        }
        LossKind::Custom(f) => {
            for n in 0..batch {
                loss += f.value(out.row(n));
                let mut g = vec![0.0; width];
                f.grad(out.row(n), &mut g);
                grad.row_mut(n).copy_from_slice(&g);
            }
        }
    }
    Ok((loss, grad))
}
