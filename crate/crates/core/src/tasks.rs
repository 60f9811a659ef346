//! Seeded synthetic datasets.
//!
//! * adding: regression on the sum of two marked values in a long sequence;
//! * order: classification by the temporal order of two symbol pulses;
//! * denoise: recovering two sinusoids from white noise, framed into
//!   non-overlapping 16-sample vectors.
//!
//! Sample `i` of every generator draws from its own stream seeded with
//! `derive_seed(seed, i)`, so datasets can be generated in any order or in
//! parallel with identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Vector};
use crate::rng::{derive_seed, RngState};

/// Samples per denoising frame.
pub const FRAME: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Adding,
    Order,
    Denoise,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adding" => Ok(TaskKind::Adding),
            "order" => Ok(TaskKind::Order),
            "denoise" => Ok(TaskKind::Denoise),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Scalar(f64),
    /// Clean signal, one frame per input step.
    Frames(Vec<Vector>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub inputs: Vec<Vector>,
    pub target: Target,
    /// Denoise only: realized SNR of the mixture in dB.
    pub snr_db: Option<f64>,
}

impl LabeledSequence {
    /// The unprocessed input signal, for the denoising task.
    pub fn mixture_signal(&self) -> Vec<f64> {
        self.inputs.iter().flat_map(|f| f.iter().copied()).collect()
    }

    pub fn clean_signal(&self) -> Option<Vec<f64>> {
        match &self.target {
            Target::Frames(frames) => Some(frames.iter().flat_map(|f| f.iter().copied()).collect()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub feature_dim: usize,
    /// Readout width the task needs.
    pub output_dim: usize,
    pub samples: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn sample_rng(seed: u64, index: usize) -> RngState {
    RngState::new(derive_seed(seed, index as u64))
}

fn two_positions(rng: &mut RngState, length: usize) -> (usize, usize) {
    let p = rng.below(length);
    let mut q = rng.below(length - 1);
    if q >= p {
        q += 1;
    }
    (p, q)
}

pub fn gen_adding(seed: u64, count: usize, length: usize) -> Result<Dataset> {
    if length < 2 {
        return Err(Error::InvalidArgument(format!(
            "adding task needs length >= 2, got {length}"
        )));
    }
    let samples = (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let values: Vec<f64> = (0..length).map(|_| rng.next_f64()).collect();
            let (p, q) = two_positions(&mut rng, length);
            let inputs = values
                .iter()
                .enumerate()
                .map(|(t, &v)| {
                    let marker = if t == p || t == q { 1.0 } else { 0.0 };
                    Vector::from(vec![v, marker])
                })
                .collect();
            LabeledSequence {
                inputs,
                target: Target::Scalar(values[p] + values[q]),
                snr_db: None,
            }
        })
        .collect();
    Ok(Dataset {
        kind: TaskKind::Adding,
        feature_dim: 2,
        output_dim: 1,
        samples,
    })
}

/// Smallest alphabet whose ordered symbol pairs cover `n_classes`.
pub fn order_alphabet(n_classes: usize) -> usize {
    (2..).find(|a| a * (a - 1) >= n_classes).expect("unbounded search")
}

/// Class table of the order task: pairs `(a, b)` with `a < b` are followed
/// immediately by their swap `(b, a)`, so classes `2j` and `2j + 1` differ
/// only in pulse order.
pub fn order_class_pairs(n_classes: usize) -> Vec<(usize, usize)> {
    let a = order_alphabet(n_classes);
    let mut pairs = Vec::with_capacity(n_classes);
    'outer: for hi in 1..a {
        for lo in 0..hi {
            for pair in [(lo, hi), (hi, lo)] {
                if pairs.len() == n_classes {
                    break 'outer;
                }
                pairs.push(pair);
            }
        }
    }
    pairs
}

/// Amplitude of the uniform background noise in the order task.
const ORDER_NOISE: f64 = 0.2;

pub fn gen_order_classify(
    seed: u64,
    count: usize,
    length: usize,
    n_classes: usize,
) -> Result<Dataset> {
    if n_classes < 2 || length < 2 {
        return Err(Error::InvalidArgument(format!(
            "order task needs n_classes >= 2 and length >= 2, got {n_classes} and {length}"
        )));
    }
    let alphabet = order_alphabet(n_classes);
    let pairs = order_class_pairs(n_classes);
    let samples = (0..count)
        .map(|i| {
            let class = i % n_classes;
            let (first, second) = pairs[class];
            let mut rng = sample_rng(seed, i);
            let (a, b) = two_positions(&mut rng, length);
            let (p, q) = (a.min(b), a.max(b));
            let inputs = (0..length)
                .map(|t| {
                    let mut frame: Vec<f64> = (0..alphabet)
                        .map(|_| rng.uniform(-ORDER_NOISE, ORDER_NOISE).expect("valid range"))
                        .collect();
                    if t == p {
                        frame[first] += 1.0;
                    } else if t == q {
                        frame[second] += 1.0;
                    }
                    Vector::from(frame)
                })
                .collect();
            LabeledSequence {
                inputs,
                target: Target::Class(class),
                snr_db: None,
            }
        })
        .collect();
    Ok(Dataset {
        kind: TaskKind::Order,
        feature_dim: alphabet,
        output_dim: n_classes,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseOptions {
    pub snr_db_range: (f64, f64),
    /// Multiplies the noise after SNR scaling; 0 yields clean mixtures.
    pub noise_gain: f64,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        Self {
            snr_db_range: (0.0, 10.0),
            noise_gain: 1.0,
        }
    }
}

pub fn gen_denoise(seed: u64, count: usize, length: usize) -> Result<Dataset> {
    gen_denoise_with(seed, count, length, DenoiseOptions::default())
}

pub fn gen_denoise_with(
    seed: u64,
    count: usize,
    length: usize,
    opts: DenoiseOptions,
) -> Result<Dataset> {
    if length < FRAME || !length.is_multiple_of(FRAME) {
        return Err(Error::InvalidArgument(format!(
            "denoise length must be a positive multiple of {FRAME}, got {length}"
        )));
    }
    let (lo, hi) = opts.snr_db_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("bad SNR range [{lo}, {hi}]")));
    }
    let frame = |signal: &[f64]| -> Vec<Vector> {
        signal.chunks(FRAME).map(Vector::from).collect()
    };
    let samples = (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mut clean = vec![0.0; length];
            for _ in 0..2 {
                let freq = rng.uniform(0.01, 0.25).expect("valid range");
                let amp = rng.uniform(0.3, 1.0).expect("valid range");
                let phase = rng.uniform(0.0, std::f64::consts::TAU).expect("valid range");
                for (n, v) in clean.iter_mut().enumerate() {
                    *v += amp * (std::f64::consts::TAU * freq * n as f64 + phase).sin();
                }
            }
            let snr = if hi > lo {
                rng.uniform(lo, hi).expect("valid range")
            } else {
                lo
            };
            let raw: Vec<f64> = (0..length).map(|_| rng.normal()).collect();
            let scale = (dot(&clean, &clean) / (dot(&raw, &raw) * 10f64.powf(snr / 10.0))).sqrt();
            let noise: Vec<f64> = raw.iter().map(|w| opts.noise_gain * scale * w).collect();
            let mixture: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + n).collect();
            let noise_power = dot(&noise, &noise);
            let snr_db = if noise_power == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (dot(&clean, &clean) / noise_power).log10()
            };
            LabeledSequence {
                inputs: frame(&mixture),
                target: Target::Frames(frame(&clean)),
                snr_db: Some(snr_db),
            }
        })
        .collect();
    Ok(Dataset {
        kind: TaskKind::Denoise,
        feature_dim: FRAME,
        output_dim: FRAME,
        samples,
    })
}

/// Generator parameters recorded in a training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_count: usize,
    pub val_count: usize,
    pub length: usize,
    /// Order task only.
    #[serde(default = "default_classes")]
    pub n_classes: usize,
}

fn default_classes() -> usize {
    4
}

impl TaskSpec {
    pub fn generate(&self, seed: u64, count: usize) -> Result<Dataset> {
        match self.kind {
            TaskKind::Adding => gen_adding(seed, count, self.length),
            TaskKind::Order => gen_order_classify(seed, count, self.length, self.n_classes),
            TaskKind::Denoise => gen_denoise(seed, count, self.length),
        }
    }

    /// Train and validation splits drawn from independent derived seeds.
    pub fn splits(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        Ok((
            self.generate(derive_seed(seed, 0x7472_6169_6e00), self.train_count)?,
            self.generate(derive_seed(seed, 0x7661_6c00), self.val_count)?,
        ))
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            TaskKind::Adding => 2,
            TaskKind::Order => order_alphabet(self.n_classes),
            TaskKind::Denoise => FRAME,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Adding => 1,
            TaskKind::Order => self.n_classes,
            TaskKind::Denoise => FRAME,
        }
    }
}
