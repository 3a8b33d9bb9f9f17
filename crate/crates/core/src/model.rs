//! Logistic regression and tanh MLPs over flat parameter vectors.
//!
//! Parameters are stored layer by layer as `W{l}` (row-major
//! `[out, in]`) followed by `b{l}`; logistic regression uses plain `W`/`b`.
//! The loss is mean softmax cross-entropy over the batch.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::params::{Layout, ParamVector, Segment};
use crate::{Error, Result};

/// Standard deviation of the Gaussian weight initialisation. Biases start at 0.
pub const INIT_WEIGHT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Logreg,
            input_dim,
            num_classes,
            hidden_dims: Vec::new(),
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model.input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        match self.kind {
            ModelKind::Logreg if !self.hidden_dims.is_empty() => Err(Error::Config(
                "model.hidden_dims is only valid for kind mlp".into(),
            )),
            ModelKind::Mlp if self.hidden_dims.is_empty() => Err(Error::Config(
                "model.hidden_dims must list at least one layer for kind mlp".into(),
            )),
            ModelKind::Mlp if self.hidden_dims.contains(&0) => Err(Error::Config(
                "model.hidden_dims entries must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// `[input_dim, hidden..., num_classes]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        if self.kind == ModelKind::Mlp {
            dims.extend_from_slice(&self.hidden_dims);
        }
        dims.push(self.num_classes);
        dims
    }

    pub fn layout(&self) -> Layout {
        let dims = self.layer_dims();
        let single = dims.len() == 2;
        let mut segments = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (w, b) = if single {
                ("W".to_string(), "b".to_string())
            } else {
                (format!("W{l}"), format!("b{l}"))
            };
            segments.push(Segment::new(w, vec![pair[1], pair[0]]));
            segments.push(Segment::new(b, vec![pair[1]]));
        }
        Layout::new(segments)
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|p| p[1] * p[0] + p[1])
            .sum()
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() || params.layout().as_ref() != &self.layout() {
            return Err(Error::LayoutMismatch {
                expected: self.num_params(),
                found: params.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim || data.num_classes() != self.num_classes {
            return Err(Error::Contract(format!(
                "dataset shape (dim {}, classes {}) does not match model (dim {}, classes {})",
                data.dim(),
                data.num_classes(),
                self.input_dim,
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Deterministic initialisation: `N(0, INIT_WEIGHT_STD^2)` weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layout.len());
    for seg in layout.segments() {
        let is_weight = seg.shape.len() == 2;
        for _ in 0..seg.size() {
            values.push(if is_weight {
                normal.sample(&mut rng)
            } else {
                0.0
            });
        }
    }
    ParamVector::new(values, layout)
}

/// Borrowed view of a parameter vector as a stack of dense layers.
pub(crate) struct Net<'a> {
    dims: Vec<usize>,
    params: &'a [f64],
}

/// Per-sample training target.
#[derive(Clone, Copy)]
pub(crate) enum Target<'a> {
    Class(usize),
    Probs(&'a [f64]),
}

impl<'a> Net<'a> {
    pub(crate) fn new(spec: &ModelSpec, params: &'a [f64]) -> Self {
        Self {
            dims: spec.layer_dims(),
            params,
        }
    }

    fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for pair in self.dims.windows(2).take(l) {
            off += pair[1] * pair[0] + pair[1];
        }
        let w = off;
        let b = w + self.dims[l + 1] * self.dims[l];
        (w, b)
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let input = &acts[l];
            let hidden = l + 1 < self.num_layers();
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &self.params[w + o * n_in..w + (o + 1) * n_in];
                    let z =
                        self.params[b + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub(crate) fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).pop().expect("at least one layer")
    }

    /// Cross-entropy of one sample; adds `scale * dL/dparams` into `grad`.
    pub(crate) fn accumulate(
        &self,
        x: &[f64],
        target: Target<'_>,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let acts = self.forward(x);
        let logits = acts.last().expect("logits");
        let probs = softmax(logits);
        let loss = cross_entropy(logits, target);

        let mut delta: Vec<f64> = probs.clone();
        match target {
            Target::Class(c) => delta[c] -= 1.0,
            Target::Probs(y) => delta.iter_mut().zip(y).for_each(|(d, y)| *d -= y),
        }
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let input = &acts[l];
            for o in 0..n_out {
                let d = scale * delta[o];
                grad[b + o] += d;
                let row = &mut grad[w + o * n_in..w + (o + 1) * n_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
            }
            if l > 0 {
                let mut prev = vec![0.0; n_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &self.params[w + o * n_in..w + (o + 1) * n_in];
                    prev.iter_mut().zip(row).for_each(|(p, wv)| *p += wv * d);
                }
                // tanh'(z) = 1 - a^2
                prev.iter_mut()
                    .zip(input)
                    .for_each(|(p, a)| *p *= 1.0 - a * a);
                delta = prev;
            }
        }
        loss
    }

    /// Mean loss and gradient over `xs` (row-major, `n` rows).
    pub(crate) fn batch_loss_grad<'t, I>(&self, rows: I, n: usize) -> (f64, Vec<f64>)
    where
        I: Iterator<Item = (&'t [f64], Target<'t>)>,
    {
        let scale = 1.0 / n as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, t) in rows {
            loss += self.accumulate(x, t, scale, &mut grad);
        }
        (loss / n as f64, grad)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn cross_entropy(logits: &[f64], target: Target<'_>) -> f64 {
    let lse = log_sum_exp(logits);
    match target {
        Target::Class(c) => lse - logits[c],
        Target::Probs(y) => y.iter().zip(logits).map(|(y, z)| y * (lse - z)).sum(),
    }
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn forward_loss_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Dataset,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_data(batch)?;
    if batch.is_empty() {
        return Err(Error::Contract(
            "forward_loss_grad needs a nonempty batch".into(),
        ));
    }
    let net = Net::new(spec, params.values());
    let rows = (0..batch.len()).map(|i| (batch.row(i), Target::Class(batch.labels()[i])));
    let (loss, grad) = net.batch_loss_grad(rows, batch.len());
    Ok((
        loss,
        ParamVector::from_raw(grad, Arc::clone(params.layout())),
    ))
}

/// Like [`forward_loss_grad`] but with soft labels: `features` holds `n`
/// rows of `input_dim` values and `label_probs` holds `n` rows of
/// `num_classes` probabilities.
pub fn forward_loss_grad_soft(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &[f64],
    label_probs: &[f64],
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    let (d, c) = (spec.input_dim, spec.num_classes);
    let n = features.len() / d;
    if n == 0 || features.len() != n * d || label_probs.len() != n * c {
        return Err(Error::Contract(format!(
            "soft batch shape mismatch: {} features, {} label values for dim {d}, {c} classes",
            features.len(),
            label_probs.len()
        )));
    }
    let net = Net::new(spec, params.values());
    let rows = (0..n).map(|i| {
        (
            &features[i * d..(i + 1) * d],
            Target::Probs(&label_probs[i * c..(i + 1) * c]),
        )
    });
    let (loss, grad) = net.batch_loss_grad(rows, n);
    Ok((
        loss,
        ParamVector::from_raw(grad, Arc::clone(params.layout())),
    ))
}

/// Output logits for a single feature row.
pub fn logits(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim {
        return Err(Error::Contract(format!(
            "input has {} features, model expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(Net::new(spec, params.values()).logits(x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy (argmax, ties to the lowest class id) and mean cross-entropy.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Evaluation> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let net = Net::new(spec, params.values());
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        let z = net.logits(data.row(i));
        let label = data.labels()[i];
        if argmax(&z) == label {
            correct += 1;
        }
        loss += cross_entropy(&z, Target::Class(label));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local.local_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("local.batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "local.learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Number of SGD steps taken on `samples` samples. A batch size larger
    /// than the dataset yields one full-batch step per epoch.
    pub fn steps_for(&self, samples: usize) -> usize {
        self.local_epochs * samples.div_ceil(self.batch_size.min(samples.max(1)))
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamVector,
    /// Mean of the mini-batch losses seen during the final epoch.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Mini-batch SGD. The input parameters are left untouched.
///
/// Returns [`Error::EmptyDataset`] for a client without samples; the engine
/// treats that as "skip this client".
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    local_train_report(spec, params, data, cfg).map(|r| r.params)
}

pub fn local_train_report(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    spec.check_params(params)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    spec.check_data(data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = params.values().to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.min(data.len());
    let mut steps = 0;
    let mut mean_loss = 0.0;
    let layout = Arc::clone(params.layout());

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let net = Net::new(spec, &current);
            let rows = chunk
                .iter()
                .map(|&i| (data.row(i), Target::Class(data.labels()[i])));
            let (loss, grad) = net.batch_loss_grad(rows, chunk.len());
            current
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= cfg.learning_rate * g);
            epoch_loss += loss;
            batches += 1;
            steps += 1;
        }
        mean_loss = epoch_loss / batches as f64;
    }
    let params = ParamVector::new(current, layout)
        .map_err(|_| Error::NonFinite("local training diverged".into()))?;
    Ok(TrainReport {
        params,
        mean_loss,
        steps,
    })
}
