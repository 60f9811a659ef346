//! Evaluation metrics: accuracy and the SDR family in dB.
//!
//! Infinite values are legitimate results: a perfect estimate has SDR `+∞`,
//! an estimate orthogonal to the target has Si-SDR `-∞`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Sdr,
    Sdri,
    SiSdr,
    SiSdri,
    Mse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Sdr => "sdr",
            MetricKind::Sdri => "sdri",
            MetricKind::SiSdr => "si_sdr",
            MetricKind::SiSdri => "si_sdri",
            MetricKind::Mse => "mse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
}

/// Base signal metric used by [`improvement`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalMetric {
    Sdr,
    SiSdr,
}

impl SignalMetric {
    pub fn eval(self, estimate: &[f64], target: &[f64]) -> Result<f64> {
        match self {
            SignalMetric::Sdr => sdr(estimate, target),
            SignalMetric::SiSdr => si_sdr(estimate, target),
        }
    }
}

fn check_signals(estimate: &[f64], target: &[f64]) -> Result<()> {
    if estimate.len() != target.len() || target.is_empty() {
        return Err(Error::Shape(format!(
            "estimate length {} vs target length {}",
            estimate.len(),
            target.len()
        )));
    }
    if target.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("target signal is all zero".into()));
    }
    Ok(())
}

/// `10 log10(‖s‖² / ‖s − ŝ‖²)`.
pub fn sdr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    check_signals(estimate, target)?;
    let signal = dot(target, target);
    let err: f64 = estimate
        .iter()
        .zip(target)
        .map(|(e, s)| (s - e) * (s - e))
        .sum();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / err).log10())
}

/// Scale-invariant SDR: the target is first scaled by the least-squares
/// factor `α = ⟨ŝ, s⟩ / ‖s‖²`.
pub fn si_sdr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    check_signals(estimate, target)?;
    if estimate.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("estimate signal is all zero".into()));
    }
    let proj = dot(estimate, target);
    if proj == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let alpha = proj / dot(target, target);
    let mut scaled = 0.0;
    let mut resid = 0.0;
    for (e, s) in estimate.iter().zip(target) {
        let st = alpha * s;
        scaled += st * st;
        resid += (e - st) * (e - st);
    }
    if resid == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (scaled / resid).log10())
}

/// `metric(estimate, target) − metric(mixture, target)`; two equal values
/// (including two equal infinities) give exactly 0.
pub fn improvement(
    metric: SignalMetric,
    estimate: &[f64],
    mixture: &[f64],
    target: &[f64],
) -> Result<f64> {
    let a = metric.eval(estimate, target)?;
    let b = metric.eval(mixture, target)?;
    if a == b {
        return Ok(0.0);
    }
    Ok(a - b)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
