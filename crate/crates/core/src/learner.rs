//! Feedforward classifier with hand-rolled backprop, local SGD and evaluation.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major (`fan_out x fan_in`) followed by its bias vector.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{embed_trigger, ClientShard, Sample, TriggerSpec};
use crate::error::{Error, Result};
use crate::linalg::{ensure_same_dim, ParameterVector};
use crate::scalar::Real;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
        }
    }

    #[inline]
    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(d_in: usize, hidden: Vec<usize>, n_classes: usize) -> Self {
        Self { d_in, hidden, n_classes, activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.n_classes < 2 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("invalid model spec {self:?}")));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.d_in);
        w.extend_from_slice(&self.hidden);
        w.push(self.n_classes);
        w
    }

    fn layers(&self) -> Vec<Layer> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|p| {
                let l = Layer { fan_in: p[0], fan_out: p[1], offset };
                offset += (p[0] + 1) * p[1];
                l
            })
            .collect()
    }

    /// Σ over layers of `(fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    /// Index ranges of the bias blocks inside the flat parameter vector.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.layers().iter().map(|l| l.bias_offset()..l.bias_offset() + l.fan_out).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 0.1, seed: 0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("invalid training hyperparameters {self:?}")));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// `trained - global` for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate<T> {
    pub delta: ParameterVector<T>,
    pub client_id: usize,
}

/// Uniform Glorot-scaled weights and zero biases.
pub fn init_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<ParameterVector<T>> {
    spec.validate()?;
    let mut rng = seed::rng(seed, Stream::Init, &[]);
    let mut params = vec![T::zero(); spec.param_count()];
    for l in spec.layers() {
        let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
        for w in &mut params[l.offset..l.bias_offset()] {
            *w = T::of(rng.random_range(-limit..limit));
        }
    }
    Ok(ParameterVector::from_raw(params))
}

struct Trace<T> {
    /// Pre-activations per layer; the last entry holds the logits.
    pre: Vec<Vec<T>>,
    /// Post-activations per layer, starting with the input.
    post: Vec<Vec<T>>,
}

fn forward<T: Real>(params: &[T], spec: &ModelSpec, layers: &[Layer], x: &[T]) -> Trace<T> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len() + 1);
    post.push(x.to_vec());
    for (li, l) in layers.iter().enumerate() {
        let input = post.last().expect("input pushed first");
        let w = &params[l.offset..l.bias_offset()];
        let b = &params[l.bias_offset()..l.bias_offset() + l.fan_out];
        let z: Vec<T> = (0..l.fan_out)
            .map(|o| {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                row.iter().zip(input).fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
            })
            .collect();
        if li + 1 < layers.len() {
            post.push(z.iter().map(|&v| spec.activation.apply(v)).collect());
        }
        pre.push(z);
    }
    Trace { pre, post }
}

/// Softmax probabilities with the max logit subtracted; returns `(probs, log-sum-exp)`.
fn softmax<T: Real>(logits: &[T]) -> (Vec<T>, T) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    (exps.into_iter().map(|e| e / sum).collect(), max + sum.ln())
}

/// Raw class scores for one input.
pub fn logits<T: Real>(params: &ParameterVector<T>, spec: &ModelSpec, x: &[T]) -> Vec<T> {
    let layers = spec.layers();
    forward(params, spec, &layers, x).pre.pop().expect("at least one layer")
}

/// Argmax prediction; ties go to the lowest class index.
pub fn predict<T: Real>(params: &ParameterVector<T>, spec: &ModelSpec, x: &[T]) -> usize {
    argmax(&logits(params, spec, x))
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over `batch` and its gradient with respect to `params`.
pub fn loss_and_grad<T: Real>(params: &[T], spec: &ModelSpec, batch: &[&Sample<T>]) -> (T, Vec<T>) {
    let layers = spec.layers();
    let mut grad = vec![T::zero(); params.len()];
    let mut loss = T::zero();
    for s in batch {
        let trace = forward(params, spec, &layers, &s.features);
        let logits = trace.pre.last().expect("at least one layer");
        let (probs, lse) = softmax(logits);
        loss = loss + (lse - logits[s.label]);

        let mut delta = probs;
        delta[s.label] = delta[s.label] - T::one();
        for li in (0..layers.len()).rev() {
            let l = layers[li];
            let input = &trace.post[li];
            let (gw, rest) = grad[l.offset..].split_at_mut(l.fan_in * l.fan_out);
            for o in 0..l.fan_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                for (g, &x) in gw[o * l.fan_in..(o + 1) * l.fan_in].iter_mut().zip(input) {
                    *g = *g + d * x;
                }
                rest[o] = rest[o] + d;
            }
            if li > 0 {
                let w = &params[l.offset..l.bias_offset()];
                let z_prev = &trace.pre[li - 1];
                delta = (0..l.fan_in)
                    .map(|i| {
                        let back = (0..l.fan_out).fold(T::zero(), |acc, o| acc + w[o * l.fan_in + i] * delta[o]);
                        back * spec.activation.derivative(z_prev[i])
                    })
                    .collect();
            }
        }
    }
    let n = T::of_usize(batch.len().max(1));
    grad.iter_mut().for_each(|g| *g = *g / n);
    (loss / n, grad)
}

/// Mean cross-entropy over `samples`.
pub fn mean_loss<T: Real>(params: &ParameterVector<T>, spec: &ModelSpec, samples: &[Sample<T>]) -> T {
    let layers = spec.layers();
    let total: T = samples
        .iter()
        .map(|s| {
            let trace = forward(params, spec, &layers, &s.features);
            let logits = trace.pre.last().expect("at least one layer");
            let (_, lse) = softmax(logits);
            lse - logits[s.label]
        })
        .sum();
    total / T::of_usize(samples.len().max(1))
}

/// Shuffle seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive(seed, Stream::Epoch, &[epoch as u64])
}

/// One pass of mini-batch SGD over `samples`, shuffled by `shuffle_seed`.
/// The trailing partial batch is kept.
pub fn train_epoch<T: Real>(
    params: &mut [T],
    samples: &[Sample<T>],
    spec: &ModelSpec,
    lr: f64,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<()> {
    train_epoch_tagged(params, samples, spec, lr, batch_size, shuffle_seed, usize::MAX, 0)
}

#[allow(clippy::too_many_arguments)]
fn train_epoch_tagged<T: Real>(
    params: &mut [T],
    samples: &[Sample<T>],
    spec: &ModelSpec,
    lr: f64,
    batch_size: usize,
    shuffle_seed: u64,
    client: usize,
    epoch: usize,
) -> Result<()> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seed::rng(shuffle_seed, Stream::Epoch, &[]));
    let lr = T::of(lr);
    for (batch_idx, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
        let (loss, grad) = loss_and_grad(params, spec, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { client, epoch, batch: batch_idx });
        }
        for (p, g) in params.iter_mut().zip(grad) {
            *p = *p - lr * g;
        }
    }
    Ok(())
}

/// Trains a copy of `global` on `shard` and returns the parameter difference.
pub fn local_train<T: Real>(
    global: &ParameterVector<T>,
    shard: &ClientShard<T>,
    spec: &ModelSpec,
    h: &TrainHyper,
) -> Result<ModelUpdate<T>> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard has no samples"));
    }
    ensure_same_dim(spec.param_count(), global.dim())?;
    if let Some(s) = shard.samples.iter().find(|s| s.features.len() != spec.d_in) {
        return Err(Error::DimensionMismatch { expected: spec.d_in, actual: s.features.len() });
    }
    h.validate()?;
    let mut params = global.clone().into_vec();
    for epoch in 0..h.epochs {
        train_epoch_tagged(
            &mut params,
            &shard.samples,
            spec,
            h.lr,
            h.batch_size,
            epoch_seed(h.seed, epoch),
            shard.client_id,
            epoch,
        )?;
    }
    let delta = params.iter().zip(global.iter()).map(|(&p, &g)| p - g).collect();
    Ok(ModelUpdate { delta: ParameterVector::from_raw(delta), client_id: shard.client_id })
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn evaluate<T: Real>(params: &ParameterVector<T>, data: &[Sample<T>], spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = data.iter().filter(|s| predict(params, spec, &s.features) == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of triggered `base_samples` classified as `target_label`.
pub fn attack_success_rate<T: Real>(
    params: &ParameterVector<T>,
    base_samples: &[Sample<T>],
    trigger: &TriggerSpec,
    target_label: usize,
    spec: &ModelSpec,
) -> Result<f64> {
    if base_samples.is_empty() {
        return Err(Error::Empty("attack evaluation set"));
    }
    let hits = base_samples
        .iter()
        .filter(|s| predict(params, spec, &embed_trigger(s, trigger).features) == target_label)
        .count();
    Ok(hits as f64 / base_samples.len() as f64)
}
