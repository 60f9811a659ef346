//! Uniform access to the tensors of a parameter bundle.
//!
//! Every bundle lists its tensors in one fixed order. The optimizer, the
//! gradient checker, the checkpoint writer and the initializer all walk that
//! order, which is what makes runs and files reproducible.

use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorShape {
    Vector(usize),
    Matrix(usize, usize),
}

impl TensorShape {
    pub fn len(self) -> usize {
        match self {
            TensorShape::Vector(n) => n,
            TensorShape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            TensorShape::Vector(n) => vec![n],
            TensorShape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn is_weight(self) -> bool {
        matches!(self, TensorShape::Matrix(..))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub shape: TensorShape,
    pub values: &'a [f64],
}

pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable views in the same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// Number of weight-matrix elements (biases excluded).
    fn weight_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.shape.is_weight())
            .map(|t| t.shape.len())
            .sum()
    }

    fn total_count(&self) -> usize {
        self.tensors().iter().map(|t| t.shape.len()).sum()
    }

    /// Fills every tensor, biases included, in tensor order.
    fn fill_uniform(&mut self, rng: &mut RngState, lo: f64, hi: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.uniform(lo, hi).expect("valid range");
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    fn flat_values(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }
}
