//! Minimal dense neural-network engine.
//!
//! Provides exactly what the federation needs: dense layers with ReLU /
//! identity / softmax activations, cross-entropy loss with exact analytic
//! gradients, and plain SGD steps. Everything is `f64` and value-semantic;
//! models are mutated only through explicit step operations.

use rand::Rng;

use crate::error::{Error, Result};

/// Element-wise activation attached to a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Numerically stable softmax (max-subtraction). Only meaningful as the
    /// final layer of a classifier head.
    Softmax,
}

impl Activation {
    fn apply_in_place(self, v: &mut [f64]) {
        match self {
            Activation::Relu => {
                for x in v.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            Activation::Identity => {}
            Activation::Softmax => {
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in v.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in v.iter_mut() {
                    *x /= sum;
                }
            }
        }
    }
}

/// A dense layer `y = act(W x + b)` with row-major `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "layer {out_dim}x{in_dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    /// Fan-based uniform init in `[-sqrt(6/(in+out)), +sqrt(6/(in+out))]`,
    /// zero bias.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Row `r` of the weight matrix (the fan-in weights of neuron `r`).
    pub fn weight_row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    pub fn weight_row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.out_dim {
            let row = self.weight_row(r);
            let mut acc = self.bias[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// A stack of dense layers with matching widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Per-layer pre-activations and activations recorded during a forward pass;
/// consumed by the backward pass.
pub struct ForwardTrace {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.act.last().expect("trace of a non-empty model")
    }

    /// Pre-activation values of one layer; handy for diagnosing saturation
    /// and for keeping finite-difference checks away from ReLU kinks.
    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("model must have at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input width {} does not match first layer width {}",
                input.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Evaluate the network on one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.act.pop().expect("non-empty"))
    }

    /// Forward pass that keeps per-layer intermediates for backprop.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for layer in &self.layers {
            let mut z = Vec::new();
            layer.forward_into(cur, &mut z);
            pre.push(z.clone());
            layer.activation.apply_in_place(&mut z);
            act.push(z);
            cur = act.last().expect("just pushed");
        }
        Ok(ForwardTrace { pre, act })
    }

    /// Backprop from `delta` = dL/d(pre-activation) of the last layer.
    ///
    /// Returns the parameter gradients and dL/d(input), which callers feed
    /// into upstream networks.
    pub fn backward_from_last_delta(
        &self,
        input: &[f64],
        trace: &ForwardTrace,
        delta_last: Vec<f64>,
    ) -> (GradientBundle, Vec<f64>) {
        let mut grads = GradientBundle::zeros_like(self);
        let mut delta = delta_last;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let below: &[f64] = if l == 0 { input } else { &trace.act[l - 1] };
            let lg = &mut grads.layers[l];
            for r in 0..layer.out_dim {
                let d = delta[r];
                lg.d_bias[r] = d;
                let row = &mut lg.d_weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (g, a) in row.iter_mut().zip(below) {
                    *g = d * a;
                }
            }
            // dL/d(activation below) = W^T delta
            let mut d_below = vec![0.0; layer.in_dim];
            for r in 0..layer.out_dim {
                let d = delta[r];
                for (db, w) in d_below.iter_mut().zip(layer.weight_row(r)) {
                    *db += w * d;
                }
            }
            if l == 0 {
                return (grads, d_below);
            }
            let prev = &self.layers[l - 1];
            delta = chain_through_activation(prev.activation, &trace.pre[l - 1], d_below);
        }
        unreachable!("loop returns at l == 0")
    }

    /// Backprop from dL/d(output activation). Valid for element-wise output
    /// activations; softmax outputs must go through [`loss_and_grad`].
    pub fn backward_from_output_grad(
        &self,
        input: &[f64],
        trace: &ForwardTrace,
        d_output: Vec<f64>,
    ) -> Result<(GradientBundle, Vec<f64>)> {
        let last = self.layers.last().expect("non-empty");
        if last.activation == Activation::Softmax {
            return Err(Error::invalid(
                "cannot backprop an output gradient through softmax; use loss_and_grad",
            ));
        }
        let delta = chain_through_activation(
            last.activation,
            &trace.pre[self.layers.len() - 1],
            d_output,
        );
        Ok(self.backward_from_last_delta(input, trace, delta))
    }

    /// True when every parameter is finite.
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Model with identical shapes and activations and all-zero parameters.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim, l.out_dim, l.activation))
                .collect(),
        }
    }

    /// `self += s * other`, parameter-wise.
    pub fn add_scaled(&mut self, other: &Mlp, s: f64) -> Result<()> {
        check_congruent(self, other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (pa, pb) in a.weights.iter_mut().zip(&b.weights) {
                *pa += s * pb;
            }
            for (pa, pb) in a.bias.iter_mut().zip(&b.bias) {
                *pa += s * pb;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p *= s;
            }
        }
    }

    /// Squared Euclidean distance between the full parameter vectors.
    pub fn sq_distance(&self, other: &Mlp) -> Result<f64> {
        check_congruent(self, other)?;
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (pa, pb) in a.weights.iter().zip(&b.weights) {
                acc += (pa - pb) * (pa - pb);
            }
            for (pa, pb) in a.bias.iter().zip(&b.bias) {
                acc += (pa - pb) * (pa - pb);
            }
        }
        Ok(acc)
    }
}

fn check_congruent(a: &Mlp, b: &Mlp) -> Result<()> {
    let ok = a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.in_dim == y.in_dim && x.out_dim == y.out_dim);
    if ok {
        Ok(())
    } else {
        Err(Error::shape("models are not shape-congruent"))
    }
}

/// delta = d_act ⊙ act'(pre), for element-wise activations.
fn chain_through_activation(act: Activation, pre: &[f64], mut d_act: Vec<f64>) -> Vec<f64> {
    match act {
        Activation::Identity => d_act,
        Activation::Relu => {
            for (d, z) in d_act.iter_mut().zip(pre) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            d_act
        }
        Activation::Softmax => unreachable!("softmax handled via last-layer delta"),
    }
}

/// Weight and bias gradients for one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weights: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Gradients shape-congruent with one [`Mlp`].
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrads>,
}

impl GradientBundle {
    pub fn zeros_like(model: &Mlp) -> Self {
        GradientBundle {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weights: vec![0.0; l.weights.len()],
                    d_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("gradient bundles differ in layer count"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.d_weights.len() != b.d_weights.len() || a.d_bias.len() != b.d_bias.len() {
                return Err(Error::shape("gradient bundles are not shape-congruent"));
            }
            for (x, y) in a.d_weights.iter_mut().zip(&b.d_weights) {
                *x += y;
            }
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for g in l.d_weights.iter_mut().chain(l.d_bias.iter_mut()) {
                *g *= s;
            }
        }
    }

    /// `g += coeff * (model - anchor)`, the gradient of
    /// `coeff/2 * ||model - anchor||^2`.
    pub fn add_param_diff(&mut self, model: &Mlp, anchor: &Mlp, coeff: f64) -> Result<()> {
        check_congruent(model, anchor)?;
        if self.layers.len() != model.layers.len() {
            return Err(Error::shape("gradient bundle does not match model"));
        }
        for ((g, m), a) in self.layers.iter_mut().zip(&model.layers).zip(&anchor.layers) {
            for ((gw, mw), aw) in g.d_weights.iter_mut().zip(&m.weights).zip(&a.weights) {
                *gw += coeff * (mw - aw);
            }
            for ((gb, mb), ab) in g.d_bias.iter_mut().zip(&m.bias).zip(&a.bias) {
                *gb += coeff * (mb - ab);
            }
        }
        Ok(())
    }

    /// Euclidean norm over all entries; used for stationarity checks.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.d_weights.iter().chain(&l.d_bias))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradients for one client model: one bundle per feature extractor plus the
/// inference head.
#[derive(Debug, Clone)]
pub struct ClientGrads {
    pub extractors: Vec<GradientBundle>,
    pub head: GradientBundle,
}

impl ClientGrads {
    pub fn zeros_like(extractors: &[Mlp], head: &Mlp) -> Self {
        ClientGrads {
            extractors: extractors.iter().map(GradientBundle::zeros_like).collect(),
            head: GradientBundle::zeros_like(head),
        }
    }

    pub fn accumulate(&mut self, other: &ClientGrads) -> Result<()> {
        for (a, b) in self.extractors.iter_mut().zip(&other.extractors) {
            a.accumulate(b)?;
        }
        self.head.accumulate(&other.head)
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.extractors {
            g.scale(s);
        }
        self.head.scale(s);
    }
}

/// Cross-entropy loss and exact analytic gradients of one sample through the
/// client's per-block extractors and softmax-output head.
///
/// `blocks` must hold the client's feature blocks in global feature-index
/// order, one vector per extractor.
pub fn loss_and_grad(
    extractors: &[Mlp],
    head: &Mlp,
    blocks: &[Vec<f64>],
    label: usize,
) -> Result<(f64, ClientGrads)> {
    if blocks.len() != extractors.len() {
        return Err(Error::shape(format!(
            "{} blocks given for {} extractors",
            blocks.len(),
            extractors.len()
        )));
    }
    let classes = head.out_dim();
    if label >= classes {
        return Err(Error::invalid(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    if head.layers().last().expect("non-empty").activation() != Activation::Softmax {
        return Err(Error::invalid("inference head must end in softmax"));
    }

    let mut traces = Vec::with_capacity(extractors.len());
    let mut embedding = Vec::new();
    for (ext, block) in extractors.iter().zip(blocks) {
        let trace = ext.forward_trace(block)?;
        embedding.extend_from_slice(trace.output());
        traces.push(trace);
    }

    let head_trace = head.forward_trace(&embedding)?;
    let probs = head_trace.output();
    let loss = -probs[label].max(1e-300).ln();

    // Softmax + cross-entropy: delta at the last pre-activation is p - e_y.
    let mut delta: Vec<f64> = probs.to_vec();
    delta[label] -= 1.0;
    let (head_grad, d_embedding) = head.backward_from_last_delta(&embedding, &head_trace, delta);

    let mut extractor_grads = Vec::with_capacity(extractors.len());
    let mut offset = 0;
    for ((ext, block), trace) in extractors.iter().zip(blocks).zip(&traces) {
        let width = ext.out_dim();
        let d_out = d_embedding[offset..offset + width].to_vec();
        offset += width;
        let (g, _) = ext.backward_from_output_grad(block, trace, d_out)?;
        extractor_grads.push(g);
    }

    Ok((
        loss,
        ClientGrads {
            extractors: extractor_grads,
            head: head_grad,
        },
    ))
}

/// Cross-entropy loss of one sample without gradients; the forward-only
/// companion of [`loss_and_grad`].
pub fn loss_only(extractors: &[Mlp], head: &Mlp, blocks: &[Vec<f64>], label: usize) -> Result<f64> {
    if blocks.len() != extractors.len() {
        return Err(Error::shape(format!(
            "{} blocks given for {} extractors",
            blocks.len(),
            extractors.len()
        )));
    }
    if label >= head.out_dim() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            head.out_dim()
        )));
    }
    let mut embedding = Vec::new();
    for (ext, block) in extractors.iter().zip(blocks) {
        embedding.extend(ext.forward(block)?);
    }
    let probs = head.forward(&embedding)?;
    Ok(-probs[label].max(1e-300).ln())
}

/// Class scores of one sample through extractors and head.
pub fn predict(extractors: &[Mlp], head: &Mlp, blocks: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut embedding = Vec::new();
    for (ext, block) in extractors.iter().zip(blocks) {
        embedding.extend(ext.forward(block)?);
    }
    head.forward(&embedding)
}

/// One plain SGD step: every parameter `p <- p - lr * g`.
///
/// `lr = 0` is accepted and leaves the model bit-identical.
pub fn sgd_step(model: &mut Mlp, grads: &GradientBundle, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
    }
    if grads.layers.len() != model.layers.len() {
        return Err(Error::shape("gradient bundle does not match model"));
    }
    for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
        if g.d_weights.len() != layer.weights.len() || g.d_bias.len() != layer.bias.len() {
            return Err(Error::shape("gradient bundle is not shape-congruent"));
        }
        for (p, d) in layer.weights.iter_mut().zip(&g.d_weights) {
            *p -= lr * d;
        }
        for (p, d) in layer.bias.iter_mut().zip(&g.d_bias) {
            *p -= lr * d;
        }
    }
    debug_assert!(model.is_finite(), "parameters left the finite range");
    Ok(())
}
