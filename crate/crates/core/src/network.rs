//! The binary-hidden-activation MLP.
//!
//! Forward passes threshold the hidden pre-activations to {0, 1}. Backward
//! passes replace the step's derivative with `σ(2s)(1 − σ(2s))`
//! (straight-through style). A [`HiddenActivation::Relaxed`] mode swaps the
//! step for `σ(2s)` everywhere, giving an exactly differentiable network for
//! finite-difference checks of the chain-rule code.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{self, glorot_uniform, sigmoid, softmax, Matrix, SeededRng};

pub const INPUTS: usize = 784;
pub const HIDDEN: usize = 100;
pub const OUTPUTS: usize = 10;

/// Layer widths `(inputs, hidden, outputs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl Shape {
    pub const MNIST: Shape = Shape {
        inputs: INPUTS,
        hidden: HIDDEN,
        outputs: OUTPUTS,
    };

    pub fn new(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Shape {
            inputs,
            hidden,
            outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.outputs * self.hidden + self.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HiddenActivation {
    /// Step forward, `σ(2s)(1 − σ(2s))` backward.
    #[default]
    Binary,
    /// `σ(2s)` forward with its exact derivative backward.
    Relaxed,
}

impl HiddenActivation {
    #[inline]
    pub fn apply(self, s: f64) -> f64 {
        match self {
            HiddenActivation::Binary => step(s),
            HiddenActivation::Relaxed => sigmoid(2.0 * s),
        }
    }

    #[inline]
    pub fn derivative(self, s: f64) -> f64 {
        match self {
            HiddenActivation::Binary => surrogate_slope(s),
            HiddenActivation::Relaxed => 2.0 * surrogate_slope(s),
        }
    }
}

#[inline]
fn step(s: f64) -> f64 {
    if s >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn surrogate_slope(s: f64) -> f64 {
    let a = sigmoid(2.0 * s);
    a * (1.0 - a)
}

/// On/off state of every hidden neuron for one input.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HiddenState(Vec<u8>);

impl HiddenState {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Argument(format!(
                "hidden state bit {b} is not 0 or 1"
            )));
        }
        Ok(HiddenState(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().map(|&b| usize::from(b)).sum()
    }
}

/// `b(s)`: 1 where `s ≥ 0`, else 0.
pub fn binary_activation(s: &[f64]) -> HiddenState {
    HiddenState(s.iter().map(|&v| step(v) as u8).collect())
}

/// `σ(2s)(1 − σ(2s))` elementwise.
pub fn surrogate_gradient(s: &[f64]) -> Vec<f64> {
    s.iter().map(|&v| surrogate_slope(v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub activation: HiddenActivation,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre_hidden: Vec<f64>,
    /// Hidden outputs fed to the second layer (0/1 for the binary network).
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: usize,
}

impl ForwardTrace {
    /// The thresholded hidden state, regardless of activation mode.
    pub fn state(&self) -> HiddenState {
        binary_activation(&self.pre_hidden)
    }
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases.
    pub fn init(shape: Shape, rng: &mut SeededRng) -> Self {
        MlpModel {
            w1: glorot_uniform(shape.hidden, shape.inputs, rng),
            b1: vec![0.0; shape.hidden],
            w2: glorot_uniform(shape.outputs, shape.hidden, rng),
            b2: vec![0.0; shape.outputs],
            activation: HiddenActivation::Binary,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        MlpModel {
            w1: Matrix::zeros(shape.hidden, shape.inputs),
            b1: vec![0.0; shape.hidden],
            w2: Matrix::zeros(shape.outputs, shape.hidden),
            b2: vec![0.0; shape.outputs],
            activation: HiddenActivation::Binary,
        }
    }

    pub fn with_activation(mut self, activation: HiddenActivation) -> Self {
        self.activation = activation;
        self
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.w1.cols(), self.w1.rows(), self.w2.rows())
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    /// Parameters in serialization order: W1 row-major, b1, W2 row-major, b2.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
            .copied()
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// Forward pass. Panics if `x` has the wrong length.
    pub fn forward(&self, x: &[f64]) -> ForwardTrace {
        let mut pre_hidden = vec![0.0; self.b1.len()];
        numerics::affine_into(x, &self.w1, &self.b1, &mut pre_hidden);
        let hidden: Vec<f64> = pre_hidden
            .iter()
            .map(|&s| self.activation.apply(s))
            .collect();
        let mut logits = vec![0.0; self.b2.len()];
        numerics::affine_into(&hidden, &self.w2, &self.b2, &mut logits);
        let probs = softmax(&logits);
        let label = numerics::argmax(&probs);
        ForwardTrace {
            pre_hidden,
            hidden,
            logits,
            probs,
            label,
        }
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.w1.cols() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: self.w1.cols(),
                found: x.len(),
            });
        }
        Ok(self.forward(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        self.forward(x).label
    }

    /// Cross-entropy of the model's output against `target`.
    pub fn loss(&self, x: &[f64], target: &[f64]) -> f64 {
        numerics::cross_entropy(target, &self.forward(x).probs)
    }

    /// `(W2ᵀ·δ_out) ⊙ act'(s)`: the error signal on the hidden pre-activations.
    pub fn hidden_delta(&self, trace: &ForwardTrace, out_delta: &[f64]) -> Vec<f64> {
        let back = numerics::transpose_matvec(&self.w2, out_delta);
        back.iter()
            .zip(&trace.pre_hidden)
            .map(|(g, &s)| g * self.activation.derivative(s))
            .collect()
    }

    /// θ ← θ − lr·dθ for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if grads.shape() != self.shape() {
            return Err(Error::Argument(
                "gradient shape does not match model".into(),
            ));
        }
        match grads.active_columns() {
            None => {
                for (p, g) in self.params_mut().zip(grads.params()) {
                    *p -= lr * g;
                }
            }
            Some(cols) => {
                // untouched columns hold zero gradient; θ − lr·0 = θ
                for j in 0..self.w1.rows() {
                    let g = grads.dw1.row(j);
                    let w = self.w1.row_mut(j);
                    for &c in cols {
                        w[c] -= lr * g[c];
                    }
                }
                let rest = self
                    .b1
                    .iter_mut()
                    .chain(self.w2.as_mut_slice())
                    .chain(&mut self.b2);
                let grest = grads
                    .db1
                    .iter()
                    .chain(grads.dw2.as_slice())
                    .chain(&grads.db2);
                for (p, g) in rest.zip(grest) {
                    *p -= lr * g;
                }
            }
        }
        Ok(())
    }

    /// Little-endian container: 16-byte header then all parameters as f64.
    ///
    /// Header: `b"BMLP"`, version `u16` (=1), inputs `u16`, hidden `u16`,
    /// outputs `u16`, parameter count `u32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * shape.param_count());
        out.extend_from_slice(MODEL_TAG);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for dim in [shape.inputs, shape.hidden, shape.outputs] {
            out.extend_from_slice(&(dim as u16).to_le_bytes());
        }
        out.extend_from_slice(&(shape.param_count() as u32).to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: String| Error::ModelFormat { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(bad(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
        }
        if &bytes[..4] != MODEL_TAG {
            return Err(bad(
                0,
                format!("format tag {:?} is not \"BMLP\"", &bytes[..4]),
            ));
        }
        let u16_at = |at: usize| usize::from(u16::from_le_bytes([bytes[at], bytes[at + 1]]));
        let version = u16_at(4) as u16;
        if version != MODEL_VERSION {
            return Err(bad(4, format!("unsupported version {version}")));
        }
        let shape = Shape::new(u16_at(6), u16_at(8), u16_at(10));
        if shape.inputs == 0 || shape.hidden == 0 || shape.outputs == 0 {
            return Err(bad(6, "zero layer width".into()));
        }
        let count = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]) as usize;
        if count != shape.param_count() {
            return Err(bad(
                12,
                format!(
                    "parameter count {count} does not match shape ({})",
                    shape.param_count()
                ),
            ));
        }
        let expected = HEADER_LEN + 8 * count;
        if bytes.len() != expected {
            return Err(bad(
                bytes.len().min(expected),
                format!("expected {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut model = MlpModel::zeros(shape);
        for (i, (p, chunk)) in model
            .params_mut()
            .zip(bytes[HEADER_LEN..].chunks_exact(8))
            .enumerate()
        {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(bad(HEADER_LEN + 8 * i, format!("non-finite parameter {v}")));
            }
            *p = v;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const MODEL_TAG: &[u8; 4] = b"BMLP";
const MODEL_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// Gradients with the same layout as [`MlpModel`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub dw1: Matrix,
    pub db1: Vec<f64>,
    pub dw2: Matrix,
    pub db2: Vec<f64>,
    // Input columns of dw1 written since the last clear; `None` means dense.
    active: Option<ActiveColumns>,
}

#[derive(Debug, Clone)]
struct ActiveColumns {
    cols: Vec<usize>,
    mask: Vec<bool>,
}

impl PartialEq for GradientSet {
    fn eq(&self, other: &Self) -> bool {
        self.dw1 == other.dw1
            && self.db1 == other.db1
            && self.dw2 == other.dw2
            && self.db2 == other.db2
    }
}

impl GradientSet {
    pub fn zeros(shape: Shape) -> Self {
        GradientSet {
            dw1: Matrix::zeros(shape.hidden, shape.inputs),
            db1: vec![0.0; shape.hidden],
            dw2: Matrix::zeros(shape.outputs, shape.hidden),
            db2: vec![0.0; shape.outputs],
            active: None,
        }
    }

    /// Like [`GradientSet::zeros`], but remembers which input columns
    /// [`GradientSet::add_hidden_layer`] touched so that `clear`, `is_finite`
    /// and [`MlpModel::sgd_step`] skip the rest of `dw1`. Only valid while
    /// `dw1` is written through `add_hidden_layer` alone.
    pub fn sparse(shape: Shape) -> Self {
        GradientSet {
            active: Some(ActiveColumns {
                cols: Vec::new(),
                mask: vec![false; shape.inputs],
            }),
            ..GradientSet::zeros(shape)
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.dw1.cols(), self.dw1.rows(), self.dw2.rows())
    }

    /// Touched `dw1` columns, or `None` when every column must be visited.
    pub(crate) fn active_columns(&self) -> Option<&[usize]> {
        self.active.as_ref().map(|a| a.cols.as_slice())
    }

    pub fn clear(&mut self) {
        match &mut self.active {
            None => self.dw1.as_mut_slice().fill(0.0),
            Some(a) => {
                let cols = self.dw1.cols();
                let data = self.dw1.as_mut_slice();
                for row in data.chunks_mut(cols) {
                    for &c in &a.cols {
                        row[c] = 0.0;
                    }
                }
                for &c in &a.cols {
                    a.mask[c] = false;
                }
                a.cols.clear();
            }
        }
        self.db1.fill(0.0);
        self.dw2.as_mut_slice().fill(0.0);
        self.db2.fill(0.0);
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.dw1
            .as_slice()
            .iter()
            .chain(&self.db1)
            .chain(self.dw2.as_slice())
            .chain(&self.db2)
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        let Some(cols) = self.active_columns() else {
            return self.params().all(f64::is_finite);
        };
        let w1_ok = (0..self.dw1.rows()).all(|j| {
            let row = self.dw1.row(j);
            cols.iter().all(|&c| row[c].is_finite())
        });
        w1_ok
            && self
                .db1
                .iter()
                .chain(self.dw2.as_slice())
                .chain(&self.db2)
                .all(|v| v.is_finite())
    }

    /// Adds `scale·δ_outᵀ ⊗ hidden` to the output layer.
    pub fn add_output_layer(&mut self, out_delta: &[f64], hidden: &[f64], scale: f64) {
        for (k, &d) in out_delta.iter().enumerate() {
            let d = scale * d;
            self.db2[k] += d;
            if d == 0.0 {
                continue;
            }
            for (g, &h) in self.dw2.row_mut(k).iter_mut().zip(hidden) {
                if h != 0.0 {
                    *g += d * h;
                }
            }
        }
    }

    /// Adds `scale·δ_hid ⊗ x` to the hidden layer.
    pub fn add_hidden_layer(&mut self, hidden_delta: &[f64], x: &[f64], scale: f64) {
        let nonzero: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
        if let Some(a) = &mut self.active {
            for &i in &nonzero {
                if !a.mask[i] {
                    a.mask[i] = true;
                    a.cols.push(i);
                }
            }
        }
        for (j, &d) in hidden_delta.iter().enumerate() {
            let d = scale * d;
            self.db1[j] += d;
            if d == 0.0 {
                continue;
            }
            let row = self.dw1.row_mut(j);
            for &i in &nonzero {
                row[i] += d * x[i];
            }
        }
    }

    /// Accumulates the full cross-entropy gradient of one sample, times `scale`.
    pub fn add_sample(
        &mut self,
        model: &MlpModel,
        x: &[f64],
        target: &[f64],
        trace: &ForwardTrace,
        scale: f64,
    ) {
        let out_delta = output_delta(trace, target);
        let hid_delta = model.hidden_delta(trace, &out_delta);
        self.add_output_layer(&out_delta, &trace.hidden, scale);
        self.add_hidden_layer(&hid_delta, x, scale);
    }
}

/// `probs − target`: the softmax/cross-entropy error at the logits.
pub fn output_delta(trace: &ForwardTrace, target: &[f64]) -> Vec<f64> {
    trace.probs.iter().zip(target).map(|(p, t)| p - t).collect()
}

/// Cross-entropy gradient of one sample.
pub fn backward(model: &MlpModel, x: &[f64], target: &[f64], trace: &ForwardTrace) -> GradientSet {
    let mut grads = GradientSet::zeros(model.shape());
    grads.add_sample(model, x, target, trace, 1.0);
    grads
}

/// Per-block mean squared differences between two models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerMse {
    pub w1: f64,
    pub b1: f64,
    pub w2: f64,
    pub b2: f64,
    /// W1 and W2 pooled, biases excluded.
    pub weights_only: f64,
    /// Every parameter pooled.
    pub pooled: f64,
}

fn sq_diff_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn layer_mse(a: &MlpModel, b: &MlpModel) -> Result<LayerMse> {
    let shape = a.shape();
    if shape != b.shape() {
        return Err(Error::Argument(format!(
            "cannot compare models of shapes {:?} and {:?}",
            shape,
            b.shape()
        )));
    }
    let w1 = sq_diff_sum(a.w1.as_slice(), b.w1.as_slice());
    let b1 = sq_diff_sum(&a.b1, &b.b1);
    let w2 = sq_diff_sum(a.w2.as_slice(), b.w2.as_slice());
    let b2 = sq_diff_sum(&a.b2, &b.b2);
    let (n_w1, n_b1) = ((shape.hidden * shape.inputs) as f64, shape.hidden as f64);
    let (n_w2, n_b2) = ((shape.outputs * shape.hidden) as f64, shape.outputs as f64);
    Ok(LayerMse {
        w1: w1 / n_w1,
        b1: b1 / n_b1,
        w2: w2 / n_w2,
        b2: b2 / n_b2,
        weights_only: (w1 + w2) / (n_w1 + n_w2),
        pooled: weight_mse(a, b)?,
    })
}

/// Mean squared difference over all parameters (W1, b1, W2, b2 pooled).
pub fn weight_mse(a: &MlpModel, b: &MlpModel) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "cannot compare models of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.params().zip(b.params()) {
        sum += (x - y) * (x - y);
        n += 1;
    }
    Ok(sum / n as f64)
}
