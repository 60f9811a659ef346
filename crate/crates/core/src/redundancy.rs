//! Hidden-state redundancy analysis.
//!
//! A feature map stacks hidden states over time: row `i` is the trajectory of
//! unit `i`, column `t` the full state at step `t`. Two views of its
//! redundancy are computed: how many principal components carry a given
//! share of the energy, and the pairwise cosine similarity of the unit
//! trajectories.

use serde::Serialize;

use crate::cells::{run_sequence, CellParams, CellState};
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, Matrix, Vector};
use crate::svd::singular_values;

/// Column budget used when the caller does not pick one.
pub const DEFAULT_MAX_STEPS: usize = 4096;

/// Slack when comparing a cumulative contribution against the threshold, so
/// a threshold of 1.0 selects the numerical rank.
const CONTRIBUTION_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Matrix,
}

impl FeatureMap {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Empty("feature map needs m, n >= 1".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature map entries".into()));
        }
        Ok(Self { values })
    }

    /// Columns are the full states `[h g]` in order.
    pub fn from_states(states: &[CellState]) -> Result<Self> {
        let cols: Vec<Vector> = states.iter().map(CellState::full).collect();
        Self::from_columns(&cols)
    }

    pub fn from_columns(cols: &[Vector]) -> Result<Self> {
        let n = cols.len();
        let m = cols.first().map_or(0, |c| c.len());
        let mut values = Matrix::zeros(m, n);
        for (t, col) in cols.iter().enumerate() {
            if col.len() != m {
                return Err(Error::Shape(format!(
                    "feature map column {t} has length {}, expected {m}",
                    col.len()
                )));
            }
            for (i, &v) in col.iter().enumerate() {
                values[(i, t)] = v;
            }
        }
        Self::new(values)
    }

    pub fn m(&self) -> usize {
        self.values.rows()
    }

    pub fn n(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Trajectory of hidden unit `i` over time.
    pub fn state_row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// Runs `cell` over each sequence from its default initial state and
/// concatenates the states along time, sequence-major, keeping at most
/// `max_steps` columns.
pub fn collect_feature_map(
    cell: &CellParams,
    sequences: &[Vec<Vector>],
    max_steps: usize,
) -> Result<FeatureMap> {
    if sequences.is_empty() || max_steps == 0 {
        return Err(Error::Empty(
            "collect_feature_map needs at least one sequence and one step".into(),
        ));
    }
    let mut cols = Vec::new();
    for xs in sequences {
        if cols.len() >= max_steps {
            break;
        }
        let remaining = max_steps - cols.len();
        let take = xs.len().min(remaining);
        let (states, _) = run_sequence(cell, &xs[..take], None)?;
        cols.extend(states.iter().map(CellState::full));
    }
    FeatureMap::from_columns(&cols)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PcaOptions {
    /// Subtract each row's mean before the decomposition.
    pub centered: bool,
    /// Accumulate squared singular values (explained variance).
    pub squared: bool,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self {
            centered: true,
            squared: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaReport {
    pub singular_values: Vec<f64>,
    /// Cumulative energy fraction of the leading `i + 1` components.
    pub contribution: Vec<f64>,
    pub k_at_threshold: usize,
    pub threshold: f64,
    pub centered: bool,
    pub squared: bool,
    /// The (centered) map had no energy at all.
    pub degenerate: bool,
}

pub fn pca_contribution(fm: &FeatureMap, threshold: f64) -> Result<PcaReport> {
    pca_contribution_with(fm, threshold, PcaOptions::default())
}

pub fn pca_contribution_with(
    fm: &FeatureMap,
    threshold: f64,
    opts: PcaOptions,
) -> Result<PcaReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut a = fm.values().clone();
    if opts.centered {
        let n = a.cols() as f64;
        for i in 0..a.rows() {
            let row = a.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    let sv = singular_values(&a)?.into_vec();
    let energy: Vec<f64> = sv
        .iter()
        .map(|&s| if opts.squared { s * s } else { s })
        .collect();
    let total: f64 = energy.iter().sum();

    let report = |contribution: Vec<f64>, k, degenerate| PcaReport {
        singular_values: sv.clone(),
        contribution,
        k_at_threshold: k,
        threshold,
        centered: opts.centered,
        squared: opts.squared,
        degenerate,
    };
    if total == 0.0 {
        return Ok(report(vec![0.0; sv.len()], 0, true));
    }
    let mut acc = 0.0;
    let mut contribution: Vec<f64> = energy
        .iter()
        .map(|e| {
            acc += e;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = contribution.last_mut() {
        *last = 1.0;
    }
    let k = contribution
        .iter()
        .position(|&c| c >= threshold - CONTRIBUTION_SLACK)
        .map_or(contribution.len(), |i| i + 1);
    Ok(report(contribution, k, false))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    /// Rows of the feature map with zero norm; their diagonal entry is set
    /// to 1 and every other entry in their row and column is 0.
    pub zero_rows: Vec<usize>,
}

/// Pairwise cosine similarity of the raw (uncentered) unit trajectories.
pub fn similarity_matrix(fm: &FeatureMap) -> SimilarityMatrix {
    let m = fm.m();
    let mut values = Matrix::identity(m);
    for i in 0..m {
        for j in i + 1..m {
            let c = cosine_similarity(fm.state_row(i), fm.state_row(j))
                .expect("rows share length");
            values[(i, j)] = c;
            values[(j, i)] = c;
        }
    }
    let zero_rows = (0..m)
        .filter(|&i| fm.state_row(i).iter().all(|&v| v == 0.0))
        .collect();
    SimilarityMatrix { values, zero_rows }
}

/// Largest ratio `r` dividing `m` that keeps at least `k_at_threshold`
/// intrinsic states; never below 1.
pub fn suggest_ratio(report: &PcaReport, m: usize) -> usize {
    (1..=m.max(1))
        .rev()
        .find(|&r| m.is_multiple_of(r) && m / r >= report.k_at_threshold)
        .unwrap_or(1)
}
