//! A recurrent cell followed by an affine readout of the full state `[h g]`.
//!
//! Classification and the adding task read out the final state; denoising
//! reads out every step, one output frame per input frame.

use crate::backprop::{bptt, cross_entropy_loss, forward_with_tape, mse_loss};
use crate::cells::{run_sequence, Activation, CellKind, CellParams};
use crate::error::{Error, Result};
use crate::linalg::{matvec, matvec_t_acc, Matrix, Vector};
use crate::params::{Parameters, TensorRef, TensorShape};
use crate::rng::RngState;
use crate::tasks::{LabeledSequence, Target, TaskKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// output × full state.
    pub weight: Matrix,
    pub bias: Vector,
}

impl Readout {
    pub fn zeros(output_dim: usize, state_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(output_dim, state_dim),
            bias: Vector::zeros(output_dim),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, state: &[f64]) -> Result<Vector> {
        let mut y = matvec(&self.weight, state)?;
        y.iter_mut().zip(self.bias.iter()).for_each(|(a, b)| *a += b);
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cell: CellParams,
    pub readout: Readout,
}

/// What a model produces for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Logits(Vector),
    Scalar(f64),
    /// Time-domain estimate built by concatenating output frames.
    Signal(Vec<f64>),
}

impl Prediction {
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Logits(l) => argmax(l),
            _ => None,
        }
    }
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

fn head_is_per_step(kind: TaskKind) -> bool {
    kind == TaskKind::Denoise
}

impl Model {
    /// Cell weights first (see [`CellParams::init`]), then the readout
    /// weight uniform in `±1/√state_dim`; readout bias zero.
    pub fn init(
        kind: CellKind,
        feature_dim: usize,
        state_dim: usize,
        ratio: usize,
        activation: Activation,
        output_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let cell = CellParams::init(kind, feature_dim, state_dim, ratio, activation, rng)?;
        let mut readout = Readout::zeros(output_dim, state_dim);
        let bound = 1.0 / (state_dim as f64).sqrt();
        for w in readout.weight.as_mut_slice() {
            *w = rng.uniform(-bound, bound)?;
        }
        Ok(Self { cell, readout })
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        let (rows, cols) = self.readout.weight.shape();
        if cols != self.cell.state_dim() && rows > 0 {
            return Err(Error::Shape(format!(
                "readout expects state of length {cols}, cell state has {}",
                self.cell.state_dim()
            )));
        }
        if self.readout.bias.len() != rows {
            return Err(Error::Shape(format!(
                "readout bias length {} vs {rows} outputs",
                self.readout.bias.len()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, kind: TaskKind, inputs: &[Vector]) -> Result<Prediction> {
        let (states, _) = run_sequence(&self.cell, inputs, None)?;
        if head_is_per_step(kind) {
            let mut signal = Vec::with_capacity(states.len() * self.readout.output_dim());
            for s in &states {
                signal.extend_from_slice(&self.readout.apply(&s.full())?);
            }
            return Ok(Prediction::Signal(signal));
        }
        let out = self
            .readout
            .apply(&states.last().expect("nonempty sequence").full())?;
        Ok(match kind {
            TaskKind::Adding => Prediction::Scalar(out[0]),
            _ => Prediction::Logits(out),
        })
    }

    /// Loss of one sample and its gradient, shaped like the model.
    pub fn loss_and_grad(&self, kind: TaskKind, sample: &LabeledSequence) -> Result<(f64, Model)> {
        let (states, tape) = forward_with_tape(&self.cell, &sample.inputs, None)?;
        let full: Vec<Vector> = states.iter().map(|s| s.full()).collect();
        let mut readout_grad = Readout::zeros(self.readout.output_dim(), self.cell.state_dim());
        let mut d_states = vec![Vector::zeros(self.cell.state_dim()); states.len()];

        let mut backprop_output = |t: usize, d_out: &[f64], rg: &mut Readout| {
            rg.weight.add_outer(d_out, &full[t]);
            rg.bias.iter_mut().zip(d_out).for_each(|(b, d)| *b += d);
            matvec_t_acc(&self.readout.weight, d_out, &mut d_states[t]);
        };

        let last = states.len() - 1;
        let loss = match (&sample.target, kind) {
            (Target::Scalar(y), TaskKind::Adding) => {
                let out = self.readout.apply(&full[last])?;
                let (l, d) = mse_loss(&out, &[*y])?;
                backprop_output(last, &d, &mut readout_grad);
                l
            }
            (Target::Class(c), TaskKind::Order) => {
                let out = self.readout.apply(&full[last])?;
                let (l, d) = cross_entropy_loss(&out, *c)?;
                backprop_output(last, &d, &mut readout_grad);
                l
            }
            (Target::Frames(frames), TaskKind::Denoise) => {
                if frames.len() != states.len() {
                    return Err(Error::Shape(format!(
                        "{} target frames for {} steps",
                        frames.len(),
                        states.len()
                    )));
                }
                let inv = 1.0 / states.len() as f64;
                let mut total = 0.0;
                for (t, target) in frames.iter().enumerate() {
                    let out = self.readout.apply(&full[t])?;
                    let (l, mut d) = mse_loss(&out, target)?;
                    d.iter_mut().for_each(|v| *v *= inv);
                    backprop_output(t, &d, &mut readout_grad);
                    total += l;
                }
                total * inv
            }
            (target, kind) => {
                return Err(Error::InvalidArgument(format!(
                    "target {target:?} does not fit task {kind:?}"
                )))
            }
        };
        let grads = bptt(&self.cell, &tape, &d_states)?;
        Ok((
            loss,
            Model {
                cell: grads.params,
                readout: readout_grad,
            },
        ))
    }

    pub fn zeros_like(&self) -> Model {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut t = self.cell.tensors();
        t.push(TensorRef {
            name: "readout.weight",
            shape: TensorShape::Matrix(self.readout.weight.rows(), self.readout.weight.cols()),
            values: self.readout.weight.as_slice(),
        });
        t.push(TensorRef {
            name: "readout.bias",
            shape: TensorShape::Vector(self.readout.bias.len()),
            values: self.readout.bias.as_slice(),
        });
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.cell.tensors_mut();
        t.push(self.readout.weight.as_mut_slice());
        t.push(self.readout.bias.as_mut_slice());
        t
    }
}
