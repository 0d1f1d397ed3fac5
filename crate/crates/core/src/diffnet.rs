//! Small differentiable network: a feedforward feature extractor followed by
//! a linear decision head, with hand-written backpropagation.
//!
//! The extractor output is the embedding that prototypes are built from; the
//! head maps embeddings to class logits. [`Model::backward`] accepts seed
//! gradients on both the logits and the embedding, so losses that act
//! directly on the embedding (prototype alignment) can be chained without a
//! separate code path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer. `weight` is row-major `[outputs][inputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        weight: Vec<f64>,
        bias: Vec<f64>,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Config(format!(
                "layer {inputs}->{outputs} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite layer parameter".into()));
        }
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            inputs,
            outputs,
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Stream) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        Self {
            weight,
            bias: vec![0.0; outputs],
            inputs,
            outputs,
            activation,
        }
    }

    #[inline]
    fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.inputs..(o + 1) * self.inputs]
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| self.bias[o] + dot(self.row(o), x))
            .collect()
    }
}

/// Inner product over the common prefix, summed in eight interleaved lanes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0; 8];
    let split = n - n % 8;
    for (ca, cb) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for k in 0..8 {
            lanes[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

/// Feature extractor plus linear decision head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub extractor: Vec<Dense>,
    pub head: Dense,
}

/// Cached intermediate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activation of each extractor layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activation of each extractor layer; the last one is the embedding.
    pub post: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Dense) -> Self {
        Self {
            weight: vec![0.0; layer.weight.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Gradients with the same shape tree as a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<LayerGrad>,
    pub head: LayerGrad,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            extractor: model.extractor.iter().map(LayerGrad::zeros_like).collect(),
            head: LayerGrad::zeros_like(&model.head),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.extractor
            .iter()
            .flat_map(LayerGrad::values)
            .chain(self.head.values())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.extractor
            .iter_mut()
            .flat_map(LayerGrad::values_mut)
            .chain(self.head.values_mut())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn congruent(&self, model: &Model) -> bool {
        self.extractor.len() == model.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&model.extractor)
                .chain(std::iter::once((&self.head, &model.head)))
                .all(|(g, l)| g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len())
    }
}

impl Model {
    pub fn new(extractor: Vec<Dense>, head: Dense) -> Result<Self> {
        if extractor.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for pair in extractor.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::Config(format!(
                    "extractor layers do not chain: {} outputs feed {} inputs",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let embed = extractor[extractor.len() - 1].outputs;
        if head.inputs != embed {
            return Err(Error::Config(format!(
                "head expects {} inputs but embedding has {embed}",
                head.inputs
            )));
        }
        Ok(Self { extractor, head })
    }

    /// Glorot-initialized model. `widths` lists the extractor output sizes;
    /// the last entry is the embedding dimension. Every extractor layer uses
    /// `activation`; the head is linear.
    pub fn init(
        input_dim: usize,
        widths: &[usize],
        num_classes: usize,
        activation: Activation,
        rng: &mut Stream,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(
                "model dimensions must be positive and the extractor non-empty".into(),
            ));
        }
        let mut extractor = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &w in widths {
            extractor.push(Dense::glorot(fan_in, w, activation, rng));
            fan_in = w;
        }
        let head = Dense::glorot(fan_in, num_classes, Activation::Identity, rng);
        Self::new(extractor, head)
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].inputs
    }

    pub fn embed_dim(&self) -> usize {
        self.head.inputs
    }

    pub fn num_classes(&self) -> usize {
        self.head.outputs
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.extractor.iter().chain(std::iter::once(&self.head))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .copied()
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for layer in self.layers_mut() {
            for p in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::Config(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut pre = Vec::with_capacity(self.extractor.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.extractor.len());
        for layer in &self.extractor {
            let z = layer.affine(post.last().map(Vec::as_slice).unwrap_or(x));
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        let logits = self.head.affine(post.last().expect("non-empty extractor"));
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
            logits,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward(x)?;
        Ok(trace.post.pop().expect("non-empty extractor"))
    }

    /// Index of the largest logit, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.logits))
    }

    /// Gradients of `<d_logits, logits> + <d_embedding, embedding>` with
    /// respect to every parameter.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &[f64],
        d_embedding: &[f64],
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(trace, d_logits, d_embedding, Some(&mut grads), None)?;
        Ok(grads)
    }

    /// Gradient of the same scalar with respect to the input vector only.
    pub fn input_gradient(
        &self,
        trace: &ForwardTrace,
        d_logits: &[f64],
        d_embedding: &[f64],
    ) -> Result<Vec<f64>> {
        let mut d_input = Vec::new();
        self.backward_into(trace, d_logits, d_embedding, None, Some(&mut d_input))?;
        Ok(d_input)
    }

    /// Accumulating backward pass. Parameter gradients are added into
    /// `grads` when given; the input gradient is written to `d_input` when
    /// given.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        d_logits: &[f64],
        d_embedding: &[f64],
        mut grads: Option<&mut Gradients>,
        d_input: Option<&mut Vec<f64>>,
    ) -> Result<()> {
        if d_logits.len() != self.num_classes()
            || d_embedding.len() != self.embed_dim()
            || trace.pre.len() != self.extractor.len()
            || trace.input.len() != self.input_dim()
        {
            return Err(Error::Input(
                "seed gradients or trace do not match the model shape".into(),
            ));
        }
        if let Some(g) = grads.as_deref() {
            if !g.congruent(self) {
                return Err(Error::Input("gradient buffer shape mismatch".into()));
            }
        }

        let embedding = trace.embedding();
        if let Some(g) = grads.as_deref_mut() {
            accumulate_layer(&mut g.head, d_logits, embedding);
        }
        let mut upstream = d_embedding.to_vec();
        transpose_mul_add(&self.head, d_logits, &mut upstream);

        let want_input = d_input.is_some();
        for (i, layer) in self.extractor.iter().enumerate().rev() {
            let d_pre: Vec<f64> = upstream
                .iter()
                .zip(&trace.pre[i])
                .map(|(d, &z)| d * layer.activation.derivative(z))
                .collect();
            let layer_input = if i == 0 {
                &trace.input
            } else {
                &trace.post[i - 1]
            };
            if let Some(g) = grads.as_deref_mut() {
                accumulate_layer(&mut g.extractor[i], &d_pre, layer_input);
            }
            if i > 0 || want_input {
                let mut next = vec![0.0; layer.inputs];
                transpose_mul_add(layer, &d_pre, &mut next);
                upstream = next;
            }
        }
        if let Some(out) = d_input {
            *out = upstream;
        }
        Ok(())
    }

    /// One SGD update `p <- p - lr * g`. The model is left untouched when
    /// the gradient contains a non-finite entry.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !grads.congruent(self) {
            return Err(Error::Input("gradient shape does not match model".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient entry".into()));
        }
        let layer_grads = grads.extractor.iter().chain(std::iter::once(&grads.head));
        for (layer, g) in self.layers_mut().zip(layer_grads) {
            for (p, d) in layer.weight.iter_mut().zip(&g.weight) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= lr * d;
            }
        }
        Ok(())
    }
}

fn accumulate_layer(g: &mut LayerGrad, d_out: &[f64], input: &[f64]) {
    let n_in = input.len();
    for (o, &d) in d_out.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g.bias[o] += d;
        for (w, x) in g.weight[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
            *w += d * x;
        }
    }
}

/// `out += W^T d`.
fn transpose_mul_add(layer: &Dense, d: &[f64], out: &mut [f64]) {
    for (o, &dv) in d.iter().enumerate() {
        if dv == 0.0 {
            continue;
        }
        for (acc, w) in out.iter_mut().zip(layer.row(o)) {
            *acc += dv * w;
        }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy `-log softmax(logits)[label]`.
pub fn loss_ce(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[label]).max(0.0))
}

/// Cross-entropy together with its gradient with respect to the logits.
pub fn ce_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let loss = loss_ce(logits, label)?;
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Euclidean distance `||a - b||` and its gradient with respect to `a`.
/// At `a == b` the gradient is taken to be zero.
pub fn distance_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    let grad = diff.into_iter().map(|d| d / norm).collect();
    (norm, grad)
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates, where `numeric` is the central difference with step `eps`.
pub fn max_relative_error<F>(params: &[f64], analytic: &[f64], eps: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = loss(&probe);
        probe[i] = params[i] - eps;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    worst
}

/// Finite-difference check of a model-level loss. `loss` returns the scalar
/// and its analytic gradients at the given model.
pub fn grad_check<F>(model: &Model, eps: f64, loss: F) -> f64
where
    F: Fn(&Model) -> (f64, Gradients),
{
    let (_, analytic) = loss(model);
    let params = model.params_flat();
    let mut probe = model.clone();
    max_relative_error(&params, &analytic.flat(), eps, |p| {
        probe.set_params_flat(p).expect("same model shape");
        loss(&probe).0
    })
}
