//! Deterministic training: Adam with decoupled weight decay, a step-down
//! learning-rate schedule, global-norm gradient clipping and early stopping
//! on validation loss.
//!
//! Batch membership is shuffled every epoch. Within a batch, per-sample
//! forward/backward passes may run on a worker pool, but gradients are
//! always summed in ascending sample-index order, so the result does not
//! depend on the number of threads.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{split_dims, Activation, CellKind};
use crate::error::{DivergedRun, Error, Result};
use crate::metrics::{accuracy, improvement, si_sdr, sdr, MetricKind, MetricValue, SignalMetric};
use crate::model::{Model, Prediction};
use crate::params::Parameters;
use crate::rng::{derive_seed, RngState};
use crate::tasks::{Dataset, LabeledSequence, Target, TaskKind, TaskSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &impl Parameters, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.values.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update:
///
/// ```text
/// m ← β1 m + (1 − β1) g,   v ← β2 v + (1 − β2) g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)       with m̂ = m / (1 − β1ᵗ), v̂ = v / (1 − β2ᵗ)
/// θ ← θ − lr · wd · θ              when wd > 0
/// ```
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grad_tensors = grads.tensors();
    let names: Vec<&'static str> = params.tensors().iter().map(|t| t.name).collect();
    if grad_tensors.len() != names.len() || state.m.len() != names.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} parameter tensors, {} gradient tensors, {} moment tensors",
            names.len(),
            grad_tensors.len(),
            state.m.len()
        )));
    }
    for (name, g) in names.iter().zip(&grad_tensors) {
        if let Some(bad) = g.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} contains {bad}")));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, lr, eps, wd) = (state.beta1, state.beta2, state.lr, state.eps, state.weight_decay);
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let g = grad_tensors[i].values;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if g.len() != theta.len() || m.len() != theta.len() {
            return Err(Error::Shape(format!(
                "adam_step: tensor {} has {} values, gradient {}, moments {}",
                names[i],
                theta.len(),
                g.len(),
                m.len()
            )));
        }
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            if wd > 0.0 {
                theta[j] -= lr * wd * theta[j];
            }
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut impl Parameters, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.values.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub iteration: u64,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub cell: CellKind,
    pub state_dim: usize,
    /// Full-to-intrinsic state ratio; must be 1 for a GRU.
    pub ratio: usize,
    pub activation: Activation,
    pub task: TaskSpec,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_iterations: Option<u64>,
    pub initial_lr: f64,
    pub lr_steps: Vec<LrStep>,
    pub weight_decay: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub early_stop_patience: usize,
    /// Worker threads for per-sample passes; 0 or 1 runs sequentially.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Ghost,
            state_dim: 32,
            ratio: 2,
            activation: Activation::Tanh,
            task: TaskSpec {
                kind: TaskKind::Adding,
                train_count: 10_000,
                val_count: 1_000,
                length: 50,
                n_classes: 4,
            },
            seed: 1,
            batch_size: 100,
            max_epochs: 20,
            max_iterations: None,
            initial_lr: 5e-4,
            lr_steps: vec![
                LrStep {
                    iteration: 10_000,
                    multiplier: 0.1,
                },
                LrStep {
                    iteration: 20_000,
                    multiplier: 0.1,
                },
            ],
            weight_decay: 1e-5,
            clip_norm: Some(5.0),
            early_stop_patience: 5,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.state_dim == 0 {
            return bad("state_dim must be positive".into());
        }
        match self.cell {
            CellKind::Gru if self.ratio != 1 => {
                return bad(format!("a GRU cell takes ratio 1, got {}", self.ratio))
            }
            _ => {
                split_dims(self.state_dim, self.ratio)?;
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive".into());
        }
        if self
            .lr_steps
            .windows(2)
            .any(|w| w[0].iteration >= w[1].iteration)
        {
            return bad("lr_steps iterations must be strictly increasing".into());
        }
        if self.lr_steps.iter().any(|s| !(s.multiplier > 0.0)) {
            return bad("lr_steps multipliers must be positive".into());
        }
        if self.task.train_count == 0 || self.task.val_count == 0 {
            return bad("train_count and val_count must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate in effect at 0-based optimizer step `iteration`.
pub fn lr_at(config: &TrainConfig, iteration: u64) -> f64 {
    config
        .lr_steps
        .iter()
        .filter(|s| s.iteration <= iteration)
        .fold(config.initial_lr, |lr, s| lr * s.multiplier)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric_name: String,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    /// Seconds per epoch. Kept apart from `records`, which must be
    /// reproducible byte for byte.
    pub wall_times: Vec<f64>,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Model,
    /// Parameters after the last completed epoch.
    pub last: Model,
    pub history: RunHistory,
}

fn metric_for(kind: TaskKind) -> MetricKind {
    match kind {
        TaskKind::Adding => MetricKind::Mse,
        TaskKind::Order => MetricKind::Accuracy,
        TaskKind::Denoise => MetricKind::SiSdri,
    }
}

/// Pool used for per-sample passes; `None` means run inline.
pub fn worker_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("cannot start {threads} workers: {e}")))
}

fn map_samples<T: Send>(
    pool: Option<&rayon::ThreadPool>,
    samples: &[&LabeledSequence],
    f: impl Fn(&LabeledSequence) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    match pool {
        Some(p) => p.install(|| samples.par_iter().map(|s| f(s)).collect()),
        None => samples.iter().map(|s| f(s)).collect(),
    }
}

/// Mean loss and mean gradient over `batch`, reduced in batch order.
pub fn batch_gradient(
    model: &Model,
    kind: TaskKind,
    batch: &[&LabeledSequence],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Model)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let per_sample = map_samples(pool, batch, |s| model.loss_and_grad(kind, s))?;
    let mut total = 0.0;
    let mut sum = model.zeros_like();
    for (loss, g) in &per_sample {
        total += loss;
        for (dst, src) in sum.tensors_mut().into_iter().zip(g.tensors()) {
            dst.iter_mut().zip(src.values).for_each(|(d, s)| *d += s);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    if batch.len() > 1 {
        sum.scale(inv);
    }
    Ok((total * inv, sum))
}

/// One optimizer step on `batch`; returns the mean batch loss.
pub fn train_step(
    model: &mut Model,
    kind: TaskKind,
    batch: &[&LabeledSequence],
    adam: &mut AdamState,
    clip_norm: Option<f64>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    let (loss, mut grads) = batch_gradient(model, kind, batch, pool)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    adam_step(model, &grads, adam)?;
    Ok(loss)
}

/// Mean loss over a dataset.
pub fn dataset_loss(
    model: &Model,
    dataset: &Dataset,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    let refs: Vec<&LabeledSequence> = dataset.samples.iter().collect();
    let losses = map_samples(pool, &refs, |s| {
        model.loss_and_grad(dataset.kind, s).map(|(l, _)| l)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn check_dims(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.cell.feature_dim() != dataset.feature_dim
        || model.readout.output_dim() != dataset.output_dim
    {
        return Err(Error::Shape(format!(
            "model maps {} features to {} outputs; dataset has {} features and {} outputs",
            model.cell.feature_dim(),
            model.readout.output_dim(),
            dataset.feature_dim,
            dataset.output_dim
        )));
    }
    Ok(())
}

/// Computes each requested metric over the whole dataset. Signal metrics
/// are averaged per sample.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    metrics: &[MetricKind],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<MetricValue>> {
    check_dims(model, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Empty("evaluate on an empty dataset".into()));
    }
    let refs: Vec<&LabeledSequence> = dataset.samples.iter().collect();
    let preds = map_samples(pool, &refs, |s| model.predict(dataset.kind, &s.inputs))?;
    metrics
        .iter()
        .map(|&kind| {
            let value = metric_over(kind, dataset, &preds)?;
            Ok(MetricValue { kind, value })
        })
        .collect()
}

fn metric_over(kind: MetricKind, dataset: &Dataset, preds: &[Prediction]) -> Result<f64> {
    let incompatible = || {
        Err(Error::InvalidArgument(format!(
            "metric {} does not apply to task {:?}",
            kind.name(),
            dataset.kind
        )))
    };
    let n = preds.len() as f64;
    match kind {
        MetricKind::Accuracy => {
            let mut p = Vec::with_capacity(preds.len());
            let mut l = Vec::with_capacity(preds.len());
            for (pred, s) in preds.iter().zip(&dataset.samples) {
                match (pred.class(), &s.target) {
                    (Some(c), Target::Class(y)) => {
                        p.push(c);
                        l.push(*y);
                    }
                    _ => return incompatible(),
                }
            }
            accuracy(&p, &l)
        }
        MetricKind::Mse => {
            let mut total = 0.0;
            for (pred, s) in preds.iter().zip(&dataset.samples) {
                total += match (pred, &s.target) {
                    (Prediction::Scalar(y_hat), Target::Scalar(y)) => (y_hat - y) * (y_hat - y),
                    (Prediction::Signal(est), Target::Frames(_)) => {
                        let clean = s.clean_signal().expect("frames target");
                        crate::backprop::mse_loss(est, &clean)?.0
                    }
                    _ => return incompatible(),
                };
            }
            Ok(total / n)
        }
        MetricKind::Sdr | MetricKind::SiSdr | MetricKind::Sdri | MetricKind::SiSdri => {
            let mut total = 0.0;
            for (pred, s) in preds.iter().zip(&dataset.samples) {
                let (Prediction::Signal(est), Some(clean)) = (pred, s.clean_signal()) else {
                    return incompatible();
                };
                let mix = s.mixture_signal();
                total += match kind {
                    MetricKind::Sdr => sdr(est, &clean)?,
                    MetricKind::SiSdr => si_sdr(est, &clean)?,
                    MetricKind::Sdri => improvement(SignalMetric::Sdr, est, &mix, &clean)?,
                    _ => improvement(SignalMetric::SiSdr, est, &mix, &clean)?,
                };
            }
            Ok(total / n)
        }
    }
}

/// Trains a fresh model as described by `config`.
///
/// Identical configurations give bitwise-identical parameters and records
/// for any thread count. On a non-finite loss the run stops with
/// [`Error::Diverged`], which carries the best parameters seen so far.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, val_set) = config.task.splits(config.seed)?;
    let mut init_rng = RngState::new(derive_seed(config.seed, 1));
    let mut model = Model::init(
        config.cell,
        train_set.feature_dim,
        config.state_dim,
        config.ratio,
        config.activation,
        train_set.output_dim,
        &mut init_rng,
    )?;
    train_model(config, &mut model, &train_set, &val_set)
}

/// The training loop proper, starting from `model`.
pub fn train_model(
    config: &TrainConfig,
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    check_dims(model, train_set)?;
    check_dims(model, val_set)?;
    let pool = worker_pool(config.threads)?;
    let pool = pool.as_ref();
    let kind = train_set.kind;
    let metric = metric_for(kind);
    let mut shuffle_rng = RngState::new(derive_seed(config.seed, 2));
    let mut adam = AdamState::new(model, config.initial_lr, config.weight_decay);
    let mut history = RunHistory::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stall = 0;
    let mut iteration: u64 = 0;
    let max_iter = config.max_iterations.unwrap_or(u64::MAX);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let diverged = |epoch, best: &Model, history: &RunHistory| {
        Error::Diverged(Box::new(DivergedRun {
            epoch,
            last_good: best.clone(),
            history: history.clone(),
        }))
    };

    for epoch in 1..=config.max_epochs {
        if iteration >= max_iter {
            break;
        }
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if iteration >= max_iter {
                break;
            }
            adam.lr = lr_at(config, iteration);
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let batch: Vec<&LabeledSequence> = members.iter().map(|&i| &train_set.samples[i]).collect();
            let loss = match train_step(model, kind, &batch, &mut adam, config.clip_norm, pool) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, &best, &history)),
                Err(e) => return Err(e),
            };
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            iteration += 1;
        }
        let val_loss = dataset_loss(model, val_set, pool)?;
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(diverged(epoch, &best, &history));
        }
        let val_metric = if metric == MetricKind::Mse {
            val_loss
        } else {
            evaluate(model, val_set, &[metric], pool)?[0].value
        };
        history.records.push(EpochRecord {
            epoch,
            iteration,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_metric_name: metric.name().to_string(),
            val_metric,
            lr: adam.lr,
        });
        history.wall_times.push(started.elapsed().as_secs_f64());
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: model.clone(),
        history,
    })
}
