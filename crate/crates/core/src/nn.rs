//! Fully-connected classifier with exact manual backpropagation.
//!
//! Weights are stored as one flat vector. Each layer contributes its weight
//! matrix (row-major, `out x in`) followed by its bias vector, layers in
//! order from input to output. The same layout is used by every inference
//! engine, the checkpoint format and the FFI.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the
    /// activation value `a`. The ReLU subgradient at zero is taken as 0.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation '{other}' (expected relu or tanh)"
            ))),
        }
    }
}

/// Architecture of the classifier: `[input, hidden..., classes]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNetworkSpec", into = "RawNetworkSpec")]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct RawNetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl TryFrom<RawNetworkSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawNetworkSpec) -> Result<Self> {
        NetworkSpec::new(raw.layer_widths, raw.activation)
    }
}

impl From<NetworkSpec> for RawNetworkSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawNetworkSpec {
            layer_widths: spec.layer_widths,
            activation: spec.activation,
        }
    }
}

/// One dense layer inside the flat weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the weight matrix; the bias follows at `offset + fan_in * fan_out`.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "network needs at least an input and an output width".into(),
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if *layer_widths.last().unwrap() < 2 {
            return Err(Error::InvalidArgument(
                "classifier needs at least 2 output classes".into(),
            ));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Width of the representation fed into the output layer.
    pub fn feature_dim(&self) -> usize {
        self.layer_widths[self.layer_widths.len() - 2]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += shape.len();
                shape
            })
            .collect()
    }

    pub fn output_layer(&self) -> LayerShape {
        *self.layers().last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(len: usize) -> Self {
        WeightVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Checks the length against `spec` and that every entry is finite.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.0.len() != spec.num_params() {
            return Err(Error::DimensionMismatch {
                expected: spec.num_params(),
                got: self.0.len(),
            });
        }
        if let Some(i) = self.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weight {i} is {}", self.0[i])));
        }
        Ok(())
    }
}

/// Row-major `n x d` inputs with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl LabeledBatch {
    /// Builds a batch, checking shapes and that each label is below `num_classes`.
    ///
    /// An empty batch is allowed; the likelihood term then vanishes and only
    /// the prior contributes to the objective.
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be >= 1".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::LengthMismatch {
                what: "inputs vs labels x dim",
                left: inputs.len(),
                right: labels.len() * dim,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { inputs, labels, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: Vec::new(),
            labels: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.inputs.chunks_exact(self.dim)
    }

    /// Copies the selected rows into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Self {
            inputs,
            labels,
            dim: self.dim,
        }
    }
}

/// Zero-mean isotropic Gaussian prior over all weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    precision: f64,
}

impl PriorSpec {
    pub fn new(precision: f64) -> Result<Self> {
        if !(precision > 0.0 && precision.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior precision must be positive and finite, got {precision}"
            )));
        }
        Ok(Self { precision })
    }

    /// Improper flat prior; only used to evaluate the bare likelihood.
    pub(crate) fn flat() -> Self {
        Self { precision: 0.0 }
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn std(&self) -> f64 {
        self.precision.recip().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleRule {
    /// `N(0, 1/fan_in)` weights.
    FanIn,
    /// `N(0, s^2)` weights.
    Fixed(f64),
}

/// Draws initial weights. Biases always start at zero.
pub fn init_weights(spec: &NetworkSpec, seed: u64, scale_rule: ScaleRule) -> WeightVector {
    let mut rng = rng::seeded(seed);
    let mut w = WeightVector::zeros(spec.num_params());
    for layer in spec.layers() {
        let std = match scale_rule {
            ScaleRule::FanIn => (1.0 / layer.fan_in as f64).sqrt(),
            ScaleRule::Fixed(s) => s,
        };
        for v in &mut w.0[layer.offset..layer.bias_offset()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
    }
    w
}

pub(crate) fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

#[inline]
fn dense(weights: &[f64], layer: &LayerShape, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &weights[layer.offset..layer.bias_offset()];
    let b = &weights[layer.bias_offset()..layer.offset + layer.len()];
    for (row, bias) in w.chunks_exact(layer.fan_in).zip(b) {
        let dot: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
        out.push(dot + bias);
    }
}

/// Computes logits for one input.
pub fn forward(spec: &NetworkSpec, weights: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, x)?;
    if weights.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            got: weights.len(),
        });
    }
    Ok(forward_unchecked(spec, weights.as_slice(), x))
}

pub(crate) fn forward_unchecked(spec: &NetworkSpec, weights: &[f64], x: &[f64]) -> Vec<f64> {
    let layers = spec.layers();
    let mut h = x.to_vec();
    let mut next = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        dense(weights, layer, &h, &mut next);
        if l + 1 < layers.len() {
            for v in next.iter_mut() {
                *v = spec.activation.apply(*v);
            }
        }
        std::mem::swap(&mut h, &mut next);
    }
    h
}

/// Penultimate activations (the input of the output layer) for one input.
pub fn features(spec: &NetworkSpec, weights: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
    check_input(spec, x)?;
    if weights.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            got: weights.len(),
        });
    }
    Ok(features_unchecked(spec, weights.as_slice(), x))
}

pub(crate) fn features_unchecked(spec: &NetworkSpec, weights: &[f64], x: &[f64]) -> Vec<f64> {
    let layers = spec.layers();
    let mut h = x.to_vec();
    let mut next = Vec::new();
    for layer in &layers[..layers.len() - 1] {
        dense(weights, layer, &h, &mut next);
        for v in next.iter_mut() {
            *v = spec.activation.apply(*v);
        }
        std::mem::swap(&mut h, &mut next);
    }
    h
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// `log softmax(logits)[y]`.
pub fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

fn check_batch(spec: &NetworkSpec, weights: &WeightVector, batch: &LabeledBatch) -> Result<()> {
    if weights.len() != spec.num_params() {
        return Err(Error::DimensionMismatch {
            expected: spec.num_params(),
            got: weights.len(),
        });
    }
    if !batch.is_empty() && batch.dim() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            got: batch.dim(),
        });
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    Ok(())
}

/// `-[sum_i log p(y_i | x_i, w) - (lambda/2) |w|^2]`, prior constant dropped.
pub fn neg_log_joint(
    spec: &NetworkSpec,
    weights: &WeightVector,
    batch: &LabeledBatch,
    prior: &PriorSpec,
) -> Result<f64> {
    check_batch(spec, weights, batch)?;
    let nll: f64 = batch
        .rows()
        .zip(batch.labels())
        .map(|(x, &y)| -log_softmax_at(&forward_unchecked(spec, weights.as_slice(), x), y))
        .sum();
    Ok(nll + 0.5 * prior.precision() * weights.squared_norm())
}

/// Exact gradient of [`neg_log_joint`] by reverse-mode differentiation.
pub fn grad_neg_log_joint(
    spec: &NetworkSpec,
    weights: &WeightVector,
    batch: &LabeledBatch,
    prior: &PriorSpec,
) -> Result<WeightVector> {
    check_batch(spec, weights, batch)?;
    let mut grad = WeightVector::zeros(weights.len());
    let mut tape = Tape::new(spec);
    for (x, &y) in batch.rows().zip(batch.labels()) {
        tape.accumulate(spec, weights.as_slice(), x, y, 1.0, grad.as_mut_slice());
    }
    let lambda = prior.precision();
    for (g, w) in grad.0.iter_mut().zip(&weights.0) {
        *g += lambda * w;
    }
    Ok(grad)
}

/// Central finite differences of [`neg_log_joint`]. Test oracle only; costs
/// two objective evaluations per coordinate.
pub fn finite_diff_grad(
    spec: &NetworkSpec,
    weights: &WeightVector,
    batch: &LabeledBatch,
    prior: &PriorSpec,
    h: f64,
) -> Result<WeightVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    check_batch(spec, weights, batch)?;
    let mut probe = weights.clone();
    let mut grad = WeightVector::zeros(weights.len());
    for i in 0..weights.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = neg_log_joint(spec, &probe, batch, prior)?;
        probe.0[i] = orig - h;
        let down = neg_log_joint(spec, &probe, batch, prior)?;
        probe.0[i] = orig;
        grad.0[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Reusable activation storage for backpropagation.
pub(crate) struct Tape {
    /// Post-activation values per layer input; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values of every layer output.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    layers: Vec<LayerShape>,
}

impl Tape {
    pub(crate) fn new(spec: &NetworkSpec) -> Self {
        let layers = spec.layers();
        Self {
            acts: vec![Vec::new(); layers.len()],
            pre: vec![Vec::new(); layers.len()],
            delta: Vec::new(),
            delta_prev: Vec::new(),
            layers,
        }
    }

    /// Adds `scale * d/dw [-log p(y|x,w)]` into `grad` and returns the
    /// unscaled negative log-likelihood of the example.
    pub(crate) fn accumulate(
        &mut self,
        spec: &NetworkSpec,
        weights: &[f64],
        x: &[f64],
        y: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let n_layers = self.layers.len();
        self.acts[0].clear();
        self.acts[0].extend_from_slice(x);
        for l in 0..n_layers {
            let layer = self.layers[l];
            dense(weights, &layer, &self.acts[l], &mut self.pre[l]);
            if l + 1 < n_layers {
                let next = &mut self.acts[l + 1];
                next.clear();
                next.extend(self.pre[l].iter().map(|&z| spec.activation.apply(z)));
            }
        }

        let logits = &self.pre[n_layers - 1];
        let nll = -log_softmax_at(logits, y);
        self.delta.clear();
        self.delta.extend(softmax(logits));
        self.delta[y] -= 1.0;

        for l in (0..n_layers).rev() {
            let layer = self.layers[l];
            let input = &self.acts[l];
            let gw = &mut grad[layer.offset..layer.bias_offset()];
            for (row, &d) in gw.chunks_exact_mut(layer.fan_in).zip(&self.delta) {
                let sd = scale * d;
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += sd * a;
                }
            }
            let gb = &mut grad[layer.bias_offset()..layer.offset + layer.len()];
            for (g, &d) in gb.iter_mut().zip(&self.delta) {
                *g += scale * d;
            }
            if l > 0 {
                let w = &weights[layer.offset..layer.bias_offset()];
                self.delta_prev.clear();
                self.delta_prev.resize(layer.fan_in, 0.0);
                for (row, &d) in w.chunks_exact(layer.fan_in).zip(&self.delta) {
                    for (acc, &wv) in self.delta_prev.iter_mut().zip(row) {
                        *acc += wv * d;
                    }
                }
                for ((acc, &z), &a) in self.delta_prev.iter_mut().zip(&self.pre[l - 1]).zip(&self.acts[l]) {
                    *acc *= spec.activation.derivative(z, a);
                }
                std::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
        nll
    }
}

/// Minibatch estimate of the full-data gradient: the likelihood part over
/// `indices` is rescaled by `scale` (usually `n / batch_size`), the prior
/// gradient `lambda * w` is added once. Returns the rescaled likelihood term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minibatch_grad(
    spec: &NetworkSpec,
    weights: &[f64],
    data: &LabeledBatch,
    indices: &[usize],
    scale: f64,
    prior: &PriorSpec,
    tape: &mut Tape,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut nll = 0.0;
    for &i in indices {
        nll += tape.accumulate(spec, weights, data.input(i), data.label(i), scale, grad);
    }
    let lambda = prior.precision();
    if lambda != 0.0 {
        for (g, w) in grad.iter_mut().zip(weights) {
            *g += lambda * w;
        }
    }
    nll * scale
}

/// Draws a standard normal vector of length `n`.
pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], act: Activation) -> NetworkSpec {
        NetworkSpec::new(widths.to_vec(), act).unwrap()
    }

    fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> LabeledBatch {
        let mut r = rng::seeded(seed);
        let d = spec.input_dim();
        let inputs = (0..n * d).map(|_| r.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| r.random_range(0..spec.num_classes())).collect();
        LabeledBatch::new(inputs, labels, d, spec.num_classes()).unwrap()
    }

    /// Straight-line forward pass through explicit per-layer matrices.
    fn reference_forward(spec: &NetworkSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
        let widths = spec.layer_widths();
        let mut offset = 0;
        let mut h = x.to_vec();
        for l in 0..widths.len() - 1 {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let mut m = vec![vec![0.0; fi]; fo];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = w[offset + r * fi + c];
                }
            }
            offset += fi * fo;
            let b = &w[offset..offset + fo];
            offset += fo;
            let mut z = vec![0.0; fo];
            for r in 0..fo {
                z[r] = b[r];
                for c in 0..fi {
                    z[r] += m[r][c] * h[c];
                }
            }
            if l + 2 < widths.len() {
                for v in z.iter_mut() {
                    *v = match spec.activation() {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3], Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![3, 1], Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 2], Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![1, 2], Activation::Relu).is_ok());
    }

    #[test]
    fn zero_scale_init_is_all_zero() {
        let s = spec(&[2, 3, 2], Activation::Relu);
        let w = init_weights(&s, 7, ScaleRule::Fixed(0.0));
        assert_eq!(w.len(), 17);
        assert!(w.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_in_init_is_deterministic_with_zero_biases() {
        let s = spec(&[2, 3, 2], Activation::Relu);
        let a = init_weights(&s, 7, ScaleRule::FanIn);
        let b = init_weights(&s, 7, ScaleRule::FanIn);
        assert_eq!(a, b);
        for layer in s.layers() {
            assert!(a.0[layer.bias_offset()..layer.offset + layer.len()]
                .iter()
                .all(|&v| v == 0.0));
        }
        assert_ne!(a, init_weights(&s, 8, ScaleRule::FanIn));
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let s = spec(&[4, 8, 3], Activation::Tanh);
        assert_eq!(s.num_params(), (4 * 8 + 8) + (8 * 3 + 3));
        assert_eq!(init_weights(&s, 123, ScaleRule::FanIn).len(), 67);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let s = spec(&[3, 5, 4], Activation::Relu);
        let w = WeightVector::zeros(s.num_params());
        assert_eq!(forward(&s, &w, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_single_layer() {
        let s = spec(&[2, 2], Activation::Relu);
        let w = WeightVector(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(forward(&s, &w, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let s = spec(&[2, 2], Activation::Relu);
        let w = WeightVector::zeros(s.num_params());
        assert!(matches!(
            forward(&s, &w, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let mut r = rng::seeded(99);
        for (i, widths) in [vec![3, 4, 2], vec![5, 7, 6, 3], vec![2, 3]].iter().enumerate() {
            for act in [Activation::Relu, Activation::Tanh] {
                let s = spec(widths, act);
                let w = init_weights(&s, i as u64, ScaleRule::Fixed(0.8));
                let w = WeightVector(w.0.iter().map(|v| v + r.random_range(-0.1..0.1)).collect());
                let x: Vec<f64> = (0..s.input_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
                let got = forward(&s, &w, &x).unwrap();
                let want = reference_forward(&s, w.as_slice(), &x);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300 || p[1] == 0.0);

        let z = [1.0f64, 2.0, 3.0];
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in softmax(&z).iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_predictive_log_two() {
        let s = spec(&[2, 2], Activation::Relu);
        let w = WeightVector::zeros(s.num_params());
        let b = LabeledBatch::new(vec![0.3, -0.4], vec![1], 2, 2).unwrap();
        let v = neg_log_joint(&s, &w, &b, &PriorSpec::flat()).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let v2 = neg_log_joint(&s, &w, &b, &PriorSpec::new(2.0).unwrap()).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn neg_log_joint_matches_per_term_sum() {
        let s = spec(&[3, 4, 3], Activation::Tanh);
        let w = init_weights(&s, 5, ScaleRule::Fixed(0.7));
        let b = random_batch(&s, 9, 5);
        let prior = PriorSpec::new(0.3).unwrap();
        let mut want = 0.0;
        for i in 0..b.len() {
            let z = reference_forward(&s, w.as_slice(), b.input(i));
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want += lse - z[b.label(i)];
        }
        want += 0.15 * w.as_slice().iter().map(|v| v * v).sum::<f64>();
        let got = neg_log_joint(&s, &w, &b, &prior).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn zero_input_zero_weight_gradient() {
        let s = spec(&[2, 3, 3], Activation::Tanh);
        let w = WeightVector::zeros(s.num_params());
        let b = LabeledBatch::new(vec![0.0; 8], vec![0, 1, 1, 2], 2, 3).unwrap();
        let g = grad_neg_log_joint(&s, &w, &b, &PriorSpec::new(1.0).unwrap()).unwrap();
        let out = s.output_layer();
        // uniform p = 1/3; sum over examples of p - onehot
        let counts = [1.0, 2.0, 1.0];
        for (k, c) in counts.iter().enumerate() {
            let want = 4.0 / 3.0 - c;
            assert!((g.0[out.bias_offset() + k] - want).abs() < 1e-14);
        }
        for (i, v) in g.0.iter().enumerate() {
            if !(out.bias_offset()..out.bias_offset() + 3).contains(&i) {
                assert_eq!(*v, 0.0, "coordinate {i}");
            }
        }
    }

    #[test]
    fn prior_gradient_is_lambda_w() {
        let s = spec(&[2, 3, 2], Activation::Relu);
        let w = init_weights(&s, 1, ScaleRule::Fixed(1.0));
        let empty = LabeledBatch::empty(2);
        let g = grad_neg_log_joint(&s, &w, &empty, &PriorSpec::new(2.5).unwrap()).unwrap();
        for (gv, wv) in g.0.iter().zip(&w.0) {
            assert_eq!(*gv, 2.5 * wv);
        }
        let fd = finite_diff_grad(&s, &w, &empty, &PriorSpec::new(2.5).unwrap(), 1e-4).unwrap();
        for (gv, wv) in fd.0.iter().zip(&w.0) {
            assert!((gv - 2.5 * wv).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let s = spec(&[3, 5, 4, 3], Activation::Tanh);
            let w = init_weights(&s, seed, ScaleRule::Fixed(0.6));
            let b = random_batch(&s, 7, seed + 100);
            let prior = PriorSpec::new(0.5).unwrap();
            let g = grad_neg_log_joint(&s, &w, &b, &prior).unwrap();
            let fd = finite_diff_grad(&s, &w, &b, &prior, 1e-5).unwrap();
            for (a, c) in g.0.iter().zip(&fd.0) {
                assert!((a - c).abs() / a.abs().max(c.abs()).max(1.0) < 1e-6);
            }
        }
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let s = spec(&[2, 4, 3], Activation::Tanh);
        let w = init_weights(&s, 3, ScaleRule::Fixed(0.9));
        let b = random_batch(&s, 6, 33);
        let prior = PriorSpec::new(0.2).unwrap();
        let g = grad_neg_log_joint(&s, &w, &b, &prior).unwrap();
        let err = |h: f64| {
            let fd = finite_diff_grad(&s, &w, &b, &prior, h).unwrap();
            g.0.iter().zip(&fd.0).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn finite_diff_rejects_nonpositive_step() {
        let s = spec(&[2, 2], Activation::Tanh);
        let w = WeightVector::zeros(s.num_params());
        assert!(finite_diff_grad(&s, &w, &LabeledBatch::empty(2), &PriorSpec::flat(), 0.0).is_err());
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        // hidden pre-activation exactly 0 -> no gradient flows to the first layer
        let s = spec(&[1, 1, 2], Activation::Relu);
        let w = WeightVector(vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
        let b = LabeledBatch::new(vec![1.0], vec![0], 1, 2).unwrap();
        let g = grad_neg_log_joint(&s, &w, &b, &PriorSpec::flat()).unwrap();
        assert_eq!(g.0[0], 0.0);
        assert_eq!(g.0[1], 0.0);
    }

    #[test]
    fn gradient_step_descends() {
        let s = spec(&[3, 6, 3], Activation::Relu);
        let w = init_weights(&s, 11, ScaleRule::FanIn);
        let b = random_batch(&s, 20, 12);
        let prior = PriorSpec::new(1.0).unwrap();
        let f0 = neg_log_joint(&s, &w, &b, &prior).unwrap();
        let g = grad_neg_log_joint(&s, &w, &b, &prior).unwrap();
        let stepped = WeightVector(w.0.iter().zip(&g.0).map(|(a, b)| a - 1e-4 * b).collect());
        assert!(neg_log_joint(&s, &stepped, &b, &prior).unwrap() < f0);
    }

    #[test]
    fn batch_rejects_bad_labels_and_shapes() {
        assert!(LabeledBatch::new(vec![0.0; 4], vec![0, 2], 2, 2).is_err());
        assert!(LabeledBatch::new(vec![0.0; 3], vec![0, 1], 2, 2).is_err());
    }

    #[test]
    fn prior_requires_positive_precision() {
        assert!(PriorSpec::new(0.0).is_err());
        assert!(PriorSpec::new(-1.0).is_err());
        assert!(PriorSpec::new(f64::NAN).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_normalised(z in proptest::collection::vec(-1e3f64..1e3, 2..12)) {
                let p = softmax(&z);
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn softmax_translation_invariant(
                z in proptest::collection::vec(-50f64..50.0, 2..8),
                c in -100f64..100.0,
            ) {
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
