//! Dense feed-forward classifier: flat parameter storage, rectifier hidden
//! layers, softmax output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// What a parameter position stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Shape of a dense network: layer widths plus one activation tag per hidden
/// layer. The flat parameter order is, per affine layer, the weight matrix in
/// row-major `[out][in]` order followed by the biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

impl Layout {
    /// A layout with rectifier activations on every hidden layer.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self::with_activations(layer_sizes, vec![Activation::Relu; hidden])
    }

    pub fn with_activations(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs at least input and output layers".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(Error::Config(format!(
                "expected {} activation tags, got {}",
                layer_sizes.len() - 2,
                activations.len()
            )));
        }
        Ok(Self {
            layer_sizes,
            activations,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of output classes.
    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of affine layers.
    pub fn affine_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: sum of `(n_in + 1) * n_out` over layer pairs.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// `(weight_offset, bias_offset, n_in, n_out)` of affine layer `l`.
    pub(crate) fn layer_span(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for w in self.layer_sizes.windows(2).take(l) {
            offset += (w[0] + 1) * w[1];
        }
        let n_in = self.layer_sizes[l];
        let n_out = self.layer_sizes[l + 1];
        (offset, offset + n_in * n_out, n_in, n_out)
    }

    /// Bind a flat position to `(layer, kind, index)`. Weight indices are
    /// row-major `out * n_in + in`; bias indices are the output unit.
    pub fn describe(&self, pos: usize) -> Option<(usize, ParamKind, usize)> {
        let mut offset = 0;
        for l in 0..self.affine_count() {
            let (_, _, n_in, n_out) = self.layer_span(l);
            let w_len = n_in * n_out;
            if pos < offset + w_len {
                return Some((l, ParamKind::Weight, pos - offset));
            }
            if pos < offset + w_len + n_out {
                return Some((l, ParamKind::Bias, pos - offset - w_len));
            }
            offset += w_len + n_out;
        }
        None
    }
}

/// Flat, ordered storage for all weights and biases of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.param_count();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(Error::LengthMismatch {
                expected: layout.param_count(),
                got: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Two vectors are combinable only when their layouts are identical.
    pub fn check_combinable(&self, other: &ParamVec) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.values.fill(v);
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &ParamVec) -> Result<()> {
        self.check_combinable(x)?;
        for (v, &xv) in self.values.iter_mut().zip(&x.values) {
            *v += a * xv;
        }
        Ok(())
    }

    /// A two-value placeholder used when a real buffer is temporarily moved
    /// out; never valid for arithmetic against a real layout.
    pub(crate) fn shell() -> ParamVec {
        ParamVec::zeros(Layout::new(vec![1, 1]).expect("fixed tiny layout"))
    }
}

/// A feed-forward classifier over a [`ParamVec`].
#[derive(Debug, Clone)]
pub struct DenseNet {
    params: ParamVec,
}

impl DenseNet {
    pub fn new(params: ParamVec) -> Self {
        Self { params }
    }

    /// Seeded init: each layer's weights and biases are uniform in
    /// `[-s, s]` with `s = sqrt(6 / (n_in + n_out))`.
    pub fn init(layout: Layout, rng: &mut impl Rng) -> Self {
        let mut params = ParamVec::zeros(layout);
        for l in 0..params.layout.affine_count() {
            let (w_off, b_off, n_in, n_out) = params.layout.layer_span(l);
            let s = (6.0 / (n_in + n_out) as f64).sqrt();
            for v in &mut params.values[w_off..b_off + n_out] {
                *v = rng.random_range(-s..=s);
            }
        }
        Self { params }
    }

    pub fn layout(&self) -> &Layout {
        self.params.layout()
    }

    pub fn params(&self) -> &ParamVec {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVec {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVec {
        self.params
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.layout().input_dim() {
            return Err(Error::InputDim {
                expected: self.layout().input_dim(),
                got: x.len(),
            });
        }
        let trace = self.forward_trace(x);
        Ok(trace.probs)
    }

    /// Index of the most probable class (first one on ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let probs = self.forward(x)?;
        Ok(argmax(&probs))
    }

    /// Forward pass keeping every layer's post-activation values, for
    /// backpropagation. `activations[l]` is the input to affine layer `l`.
    pub(crate) fn forward_trace(&self, x: &[f64]) -> Trace {
        debug_assert_eq!(x.len(), self.layout().input_dim());
        let affine = self.layout().affine_count();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(affine);
        activations.push(x.to_vec());
        let mut logits = Vec::new();
        for l in 0..affine {
            let z = self.affine(l, &activations[l]);
            if l + 1 < affine {
                activations.push(z.iter().map(|&v| v.max(0.0)).collect());
            } else {
                logits = z;
            }
        }
        let probs = softmax(&logits);
        Trace {
            activations,
            probs,
        }
    }

    fn affine(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let (w_off, b_off, n_in, n_out) = self.layout().layer_span(l);
        let values = &self.params.values;
        let mut out = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let row = &values[w_off + j * n_in..w_off + (j + 1) * n_in];
            let mut acc = values[b_off + j];
            for (w, xi) in row.iter().zip(input) {
                acc += w * xi;
            }
            out.push(acc);
        }
        out
    }
}

pub(crate) struct Trace {
    /// Post-activation input of every affine layer; `activations[0]` is `x`.
    pub activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

/// Numerically stable softmax.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
