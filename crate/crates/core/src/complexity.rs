//! Closed-form parameter and MAC counts.
//!
//! ```text
//! GRU:      3 (F + S) S
//! GhostRNN: 3 (F + S) (S / r) + Param_phi
//! Param_phi = (S / r) (S - S / r) = S^2 (r - 1) / r^2
//! ```
//!
//! Counts are weights only, as in the formulas above. One MAC is charged per
//! weight element per time step, so MACs per step equal the weight count.

use serde::{Deserialize, Serialize};

use crate::cells::{split_dims, CellKind};
use crate::error::{Error, Result};

fn check_dims(feature_dim: usize, state_dim: usize) -> Result<()> {
    if feature_dim == 0 || state_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature_dim {feature_dim} and state_dim {state_dim} must be at least 1"
        )));
    }
    Ok(())
}

pub fn param_count_gru(feature_dim: usize, state_dim: usize) -> Result<u64> {
    check_dims(feature_dim, state_dim)?;
    Ok(3 * (feature_dim + state_dim) as u64 * state_dim as u64)
}

pub fn param_count_phi(state_dim: usize, ratio: usize) -> Result<u64> {
    let (k, q) = split_dims(state_dim, ratio)?;
    Ok(k as u64 * q as u64)
}

pub fn param_count_ghost(feature_dim: usize, state_dim: usize, ratio: usize) -> Result<u64> {
    check_dims(feature_dim, state_dim)?;
    let (k, _) = split_dims(state_dim, ratio)?;
    Ok(3 * (feature_dim + state_dim) as u64 * k as u64 + param_count_phi(state_dim, ratio)?)
}

/// Bias elements the formulas leave out: six per intrinsic unit, one more
/// (`b_gc`) for GhostRNN, plus `b_phi`.
pub fn bias_count(kind: CellKind, state_dim: usize, ratio: usize) -> Result<u64> {
    Ok(match kind {
        CellKind::Gru => 6 * state_dim as u64,
        CellKind::Ghost => {
            let (k, q) = split_dims(state_dim, ratio)?;
            7 * k as u64 + q as u64
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub kind: CellKind,
    pub feature_dim: usize,
    pub state_dim: usize,
    /// Ignored for GRU.
    pub ratio: usize,
}

impl CellDims {
    pub fn weights(&self) -> Result<u64> {
        match self.kind {
            CellKind::Gru => param_count_gru(self.feature_dim, self.state_dim),
            CellKind::Ghost => param_count_ghost(self.feature_dim, self.state_dim, self.ratio),
        }
    }
}

/// One MAC per weight element per step.
pub fn macs_per_step(dims: &CellDims) -> Result<u64> {
    dims.weights()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub weights_only: u64,
    pub with_biases: u64,
    pub macs_per_step: u64,
    /// `1 - weights / gru_weights` against a GRU of the same feature and
    /// state dims; 0 for a GRU.
    pub compression_vs_gru: f64,
}

pub fn count_report(dims: &CellDims) -> Result<CountReport> {
    let weights = dims.weights()?;
    let gru = param_count_gru(dims.feature_dim, dims.state_dim)?;
    let ratio = if dims.kind == CellKind::Gru { 1 } else { dims.ratio };
    Ok(CountReport {
        weights_only: weights,
        with_biases: weights + bias_count(dims.kind, dims.state_dim, ratio)?,
        macs_per_step: macs_per_step(dims)?,
        compression_vs_gru: 1.0 - weights as f64 / gru as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        assert_eq!(param_count_gru(10, 100).unwrap(), 33_000);
        assert_eq!(param_count_gru(1, 1).unwrap(), 6);
        assert_eq!(param_count_phi(128, 2).unwrap(), 4_096);
        assert_eq!(param_count_phi(100, 2).unwrap(), 2_500);
        assert_eq!(param_count_phi(100, 1).unwrap(), 0);
        assert_eq!(param_count_ghost(10, 100, 2).unwrap(), 19_000);
        assert_eq!(param_count_ghost(10, 100, 1).unwrap(), 33_000);
    }

    #[test]
    fn errors() {
        assert!(param_count_gru(0, 5).is_err());
        assert!(matches!(param_count_phi(100, 3), Err(Error::NotDivisible { .. })));
        assert!(param_count_ghost(10, 100, 3).is_err());
    }

    #[test]
    fn phi_closed_form_matches_ratio_form() {
        // S^2 (r - 1) / r^2 when r divides S
        for (s, r) in [(128usize, 2usize), (120, 4), (96, 3), (64, 8)] {
            let closed = (s * s * (r - 1)) as f64 / (r * r) as f64;
            assert_eq!(param_count_phi(s, r).unwrap() as f64, closed);
        }
    }

    #[test]
    fn report_for_ghost() {
        let rep = count_report(&CellDims {
            kind: CellKind::Ghost,
            feature_dim: 10,
            state_dim: 100,
            ratio: 2,
        })
        .unwrap();
        assert_eq!(rep.weights_only, 19_000);
        assert_eq!(rep.macs_per_step, 19_000);
        assert_eq!(rep.with_biases, 19_000 + 7 * 50 + 50);
        assert!((rep.compression_vs_gru - (1.0 - 19.0 / 33.0)).abs() < 1e-15);
    }
}
