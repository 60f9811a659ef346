//! GRU and GhostRNN recurrent cells as pure step functions.
//!
//! GRU step (`σ` logistic, `*` elementwise):
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! c = tanh(W_ic x + b_ic + r * (W_hc h + b_hc))
//! h' = (1 - z) * c + z * h
//! ```
//!
//! The GhostRNN step keeps a reduced intrinsic state `h` (length
//! `full_dim / ratio`) and a ghost state `g = φ(h)` produced by a cheap
//! affine map plus activation. The gates read the concatenation `[h g]`; the
//! candidate adds `W_gc g + b_gc` outside the reset-gate product:
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr [h g] + b_hr)
//! z = σ(W_iz x + b_iz + W_hz [h g] + b_hz)
//! c = tanh(W_ic x + b_ic + r * (W_hc h + b_hc) + W_gc g + b_gc)
//! h' = (1 - z) * c + z * h
//! g' = φ(h')
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matvec, Matrix, Vector};
use crate::params::{Parameters, TensorRef, TensorShape};
use crate::redundancy::FeatureMap;
use crate::rng::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Sigmoid => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn uniform_init(m: &mut [f64], fan_in: usize, rng: &mut RngState) {
    if fan_in == 0 {
        return;
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in m.iter_mut() {
        *v = rng.uniform(-bound, bound).expect("positive bound");
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

fn check_matrix(what: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Parameters of a plain GRU cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ir: Matrix,
    pub w_iz: Matrix,
    pub w_ic: Matrix,
    pub w_hr: Matrix,
    pub w_hz: Matrix,
    pub w_hc: Matrix,
    pub b_ir: Vector,
    pub b_iz: Vector,
    pub b_ic: Vector,
    pub b_hr: Vector,
    pub b_hz: Vector,
    pub b_hc: Vector,
}

impl GruParams {
    pub fn zeros(feature_dim: usize, state_dim: usize) -> Self {
        let wi = Matrix::zeros(state_dim, feature_dim);
        let wh = Matrix::zeros(state_dim, state_dim);
        let b = Vector::zeros(state_dim);
        Self {
            w_ir: wi.clone(),
            w_iz: wi.clone(),
            w_ic: wi,
            w_hr: wh.clone(),
            w_hz: wh.clone(),
            w_hc: wh,
            b_ir: b.clone(),
            b_iz: b.clone(),
            b_ic: b.clone(),
            b_hr: b.clone(),
            b_hz: b.clone(),
            b_hc: b,
        }
    }

    /// Weights uniform in `±1/√fan_in`, drawn in field order
    /// `w_ir, w_iz, w_ic, w_hr, w_hz, w_hc`; biases zero.
    pub fn init(feature_dim: usize, state_dim: usize, rng: &mut RngState) -> Self {
        let mut p = Self::zeros(feature_dim, state_dim);
        for m in [&mut p.w_ir, &mut p.w_iz, &mut p.w_ic] {
            uniform_init(m.as_mut_slice(), feature_dim, rng);
        }
        for m in [&mut p.w_hr, &mut p.w_hz, &mut p.w_hc] {
            uniform_init(m.as_mut_slice(), state_dim, rng);
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.w_ir.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.w_ir.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (s, f) = (self.state_dim(), self.feature_dim());
        check_matrix("w_iz", &self.w_iz, s, f)?;
        check_matrix("w_ic", &self.w_ic, s, f)?;
        for (name, m) in [("w_hr", &self.w_hr), ("w_hz", &self.w_hz), ("w_hc", &self.w_hc)] {
            check_matrix(name, m, s, s)?;
        }
        for (name, b) in [
            ("b_ir", &self.b_ir),
            ("b_iz", &self.b_iz),
            ("b_ic", &self.b_ic),
            ("b_hr", &self.b_hr),
            ("b_hz", &self.b_hz),
            ("b_hc", &self.b_hc),
        ] {
            check_len(name, b.len(), s)?;
        }
        Ok(())
    }

    fn view(&self) -> CellView<'_> {
        CellView {
            w_ir: &self.w_ir,
            w_iz: &self.w_iz,
            w_ic: &self.w_ic,
            w_hr: &self.w_hr,
            w_hz: &self.w_hz,
            w_hc: &self.w_hc,
            b_ir: &self.b_ir,
            b_iz: &self.b_iz,
            b_ic: &self.b_ic,
            b_hr: &self.b_hr,
            b_hz: &self.b_hz,
            b_hc: &self.b_hc,
            ghost: None,
        }
    }
}

fn m<'a>(name: &'static str, w: &'a Matrix) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: TensorShape::Matrix(w.rows(), w.cols()),
        values: w.as_slice(),
    }
}

fn v<'a>(name: &'static str, b: &'a Vector) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: TensorShape::Vector(b.len()),
        values: b.as_slice(),
    }
}

impl Parameters for GruParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            m("w_ir", &self.w_ir),
            m("w_iz", &self.w_iz),
            m("w_ic", &self.w_ic),
            m("w_hr", &self.w_hr),
            m("w_hz", &self.w_hz),
            m("w_hc", &self.w_hc),
            v("b_ir", &self.b_ir),
            v("b_iz", &self.b_iz),
            v("b_ic", &self.b_ic),
            v("b_hr", &self.b_hr),
            v("b_hz", &self.b_hz),
            v("b_hc", &self.b_hc),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_ir.as_mut_slice(),
            self.w_iz.as_mut_slice(),
            self.w_ic.as_mut_slice(),
            self.w_hr.as_mut_slice(),
            self.w_hz.as_mut_slice(),
            self.w_hc.as_mut_slice(),
            self.b_ir.as_mut_slice(),
            self.b_iz.as_mut_slice(),
            self.b_ic.as_mut_slice(),
            self.b_hr.as_mut_slice(),
            self.b_hz.as_mut_slice(),
            self.b_hc.as_mut_slice(),
        ]
    }
}

/// The cheap operation `φ(h) = activation(W_phi h + b_phi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CheapOp {
    pub w_phi: Matrix,
    pub b_phi: Vector,
    pub activation: Activation,
}

impl CheapOp {
    pub fn zeros(intrinsic_dim: usize, ghost_dim: usize, activation: Activation) -> Self {
        Self {
            w_phi: Matrix::zeros(ghost_dim, intrinsic_dim),
            b_phi: Vector::zeros(ghost_dim),
            activation,
        }
    }

    pub fn ghost_dim(&self) -> usize {
        self.w_phi.rows()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.w_phi.cols()
    }

    fn pre_activation(&self, h: &[f64]) -> Result<Vector> {
        let mut a = matvec(&self.w_phi, h)?;
        for (ai, bi) in a.iter_mut().zip(self.b_phi.iter()) {
            *ai += bi;
        }
        Ok(a)
    }
}

/// `activation(W_phi h + b_phi)`.
pub fn cheap_apply(phi: &CheapOp, h: &[f64]) -> Result<Vector> {
    check_len("cheap_apply input", h.len(), phi.intrinsic_dim())?;
    let mut g = phi.pre_activation(h)?;
    g.iter_mut().for_each(|v| *v = phi.activation.apply(*v));
    Ok(g)
}

/// Parameters of a GhostRNN cell.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostParams {
    pub full_dim: usize,
    pub ratio: usize,
    pub w_ir: Matrix,
    pub w_iz: Matrix,
    pub w_ic: Matrix,
    /// intrinsic × full; multiplies `[h g]`.
    pub w_hr: Matrix,
    /// intrinsic × full; multiplies `[h g]`.
    pub w_hz: Matrix,
    /// intrinsic × intrinsic.
    pub w_hc: Matrix,
    /// intrinsic × ghost.
    pub w_gc: Matrix,
    pub b_ir: Vector,
    pub b_iz: Vector,
    pub b_ic: Vector,
    pub b_hr: Vector,
    pub b_hz: Vector,
    pub b_hc: Vector,
    pub b_gc: Vector,
    pub phi: CheapOp,
}

/// Splits `full_dim` into `(intrinsic, ghost)` for a given ratio.
pub fn split_dims(full_dim: usize, ratio: usize) -> Result<(usize, usize)> {
    if full_dim == 0 || ratio == 0 {
        return Err(Error::InvalidArgument(format!(
            "state_dim {full_dim} and ratio {ratio} must both be positive"
        )));
    }
    if !full_dim.is_multiple_of(ratio) {
        return Err(Error::NotDivisible {
            state_dim: full_dim,
            ratio,
        });
    }
    let k = full_dim / ratio;
    Ok((k, full_dim - k))
}

impl GhostParams {
    pub fn zeros(
        feature_dim: usize,
        full_dim: usize,
        ratio: usize,
        activation: Activation,
    ) -> Result<Self> {
        let (k, q) = split_dims(full_dim, ratio)?;
        let wi = Matrix::zeros(k, feature_dim);
        let b = Vector::zeros(k);
        Ok(Self {
            full_dim,
            ratio,
            w_ir: wi.clone(),
            w_iz: wi.clone(),
            w_ic: wi,
            w_hr: Matrix::zeros(k, full_dim),
            w_hz: Matrix::zeros(k, full_dim),
            w_hc: Matrix::zeros(k, k),
            w_gc: Matrix::zeros(k, q),
            b_ir: b.clone(),
            b_iz: b.clone(),
            b_ic: b.clone(),
            b_hr: b.clone(),
            b_hz: b.clone(),
            b_hc: b.clone(),
            b_gc: b,
            phi: CheapOp::zeros(k, q, activation),
        })
    }

    /// Weights uniform in `±1/√fan_in`, drawn in field order
    /// `w_ir, w_iz, w_ic, w_hr, w_hz, w_hc, w_gc, w_phi`; biases zero.
    ///
    /// With `ratio == 1` this consumes the random stream exactly like
    /// [`GruParams::init`], so both cells start from the same weights.
    pub fn init(
        feature_dim: usize,
        full_dim: usize,
        ratio: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut p = Self::zeros(feature_dim, full_dim, ratio, activation)?;
        let (k, q) = (p.intrinsic_dim(), p.ghost_dim());
        for m in [&mut p.w_ir, &mut p.w_iz, &mut p.w_ic] {
            uniform_init(m.as_mut_slice(), feature_dim, rng);
        }
        for m in [&mut p.w_hr, &mut p.w_hz] {
            uniform_init(m.as_mut_slice(), full_dim, rng);
        }
        uniform_init(p.w_hc.as_mut_slice(), k, rng);
        uniform_init(p.w_gc.as_mut_slice(), q, rng);
        uniform_init(p.phi.w_phi.as_mut_slice(), k, rng);
        Ok(p)
    }

    /// A ratio-1 GhostRNN carrying exactly the weights of `gru`.
    pub fn from_gru(gru: &GruParams) -> Self {
        let s = gru.state_dim();
        Self {
            full_dim: s,
            ratio: 1,
            w_ir: gru.w_ir.clone(),
            w_iz: gru.w_iz.clone(),
            w_ic: gru.w_ic.clone(),
            w_hr: gru.w_hr.clone(),
            w_hz: gru.w_hz.clone(),
            w_hc: gru.w_hc.clone(),
            w_gc: Matrix::zeros(s, 0),
            b_ir: gru.b_ir.clone(),
            b_iz: gru.b_iz.clone(),
            b_ic: gru.b_ic.clone(),
            b_hr: gru.b_hr.clone(),
            b_hz: gru.b_hz.clone(),
            b_hc: gru.b_hc.clone(),
            b_gc: Vector::zeros(s),
            phi: CheapOp::zeros(s, 0, Activation::Tanh),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_ir.cols()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.w_ir.rows()
    }

    pub fn ghost_dim(&self) -> usize {
        self.full_dim - self.intrinsic_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, q) = split_dims(self.full_dim, self.ratio)?;
        let f = self.feature_dim();
        check_matrix("w_ir", &self.w_ir, k, f)?;
        check_matrix("w_iz", &self.w_iz, k, f)?;
        check_matrix("w_ic", &self.w_ic, k, f)?;
        check_matrix("w_hr", &self.w_hr, k, self.full_dim)?;
        check_matrix("w_hz", &self.w_hz, k, self.full_dim)?;
        check_matrix("w_hc", &self.w_hc, k, k)?;
        check_matrix("w_gc", &self.w_gc, k, q)?;
        check_matrix("phi.w_phi", &self.phi.w_phi, q, k)?;
        check_len("phi.b_phi", self.phi.b_phi.len(), q)?;
        for (name, b) in [
            ("b_ir", &self.b_ir),
            ("b_iz", &self.b_iz),
            ("b_ic", &self.b_ic),
            ("b_hr", &self.b_hr),
            ("b_hz", &self.b_hz),
            ("b_hc", &self.b_hc),
            ("b_gc", &self.b_gc),
        ] {
            check_len(name, b.len(), k)?;
        }
        Ok(())
    }

    fn view(&self) -> CellView<'_> {
        CellView {
            w_ir: &self.w_ir,
            w_iz: &self.w_iz,
            w_ic: &self.w_ic,
            w_hr: &self.w_hr,
            w_hz: &self.w_hz,
            w_hc: &self.w_hc,
            b_ir: &self.b_ir,
            b_iz: &self.b_iz,
            b_ic: &self.b_ic,
            b_hr: &self.b_hr,
            b_hz: &self.b_hz,
            b_hc: &self.b_hc,
            ghost: Some(GhostView {
                w_gc: &self.w_gc,
                b_gc: &self.b_gc,
                phi: &self.phi,
            }),
        }
    }
}

impl Parameters for GhostParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            m("w_ir", &self.w_ir),
            m("w_iz", &self.w_iz),
            m("w_ic", &self.w_ic),
            m("w_hr", &self.w_hr),
            m("w_hz", &self.w_hz),
            m("w_hc", &self.w_hc),
            m("w_gc", &self.w_gc),
            m("phi.w_phi", &self.phi.w_phi),
            v("b_ir", &self.b_ir),
            v("b_iz", &self.b_iz),
            v("b_ic", &self.b_ic),
            v("b_hr", &self.b_hr),
            v("b_hz", &self.b_hz),
            v("b_hc", &self.b_hc),
            v("b_gc", &self.b_gc),
            v("phi.b_phi", &self.phi.b_phi),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_ir.as_mut_slice(),
            self.w_iz.as_mut_slice(),
            self.w_ic.as_mut_slice(),
            self.w_hr.as_mut_slice(),
            self.w_hz.as_mut_slice(),
            self.w_hc.as_mut_slice(),
            self.w_gc.as_mut_slice(),
            self.phi.w_phi.as_mut_slice(),
            self.b_ir.as_mut_slice(),
            self.b_iz.as_mut_slice(),
            self.b_ic.as_mut_slice(),
            self.b_hr.as_mut_slice(),
            self.b_hz.as_mut_slice(),
            self.b_hc.as_mut_slice(),
            self.b_gc.as_mut_slice(),
            self.phi.b_phi.as_mut_slice(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Ghost,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "ghost" => Ok(CellKind::Ghost),
            other => Err(Error::InvalidArgument(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Either cell's parameter bundle.
#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Gru(GruParams),
    Ghost(GhostParams),
}

impl CellParams {
    pub fn init(
        kind: CellKind,
        feature_dim: usize,
        state_dim: usize,
        ratio: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        if feature_dim == 0 || state_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {feature_dim} and state_dim {state_dim} must be positive"
            )));
        }
        Ok(match kind {
            CellKind::Gru => CellParams::Gru(GruParams::init(feature_dim, state_dim, rng)),
            CellKind::Ghost => CellParams::Ghost(GhostParams::init(
                feature_dim,
                state_dim,
                ratio,
                activation,
                rng,
            )?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Ghost(_) => CellKind::Ghost,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.feature_dim(),
            CellParams::Ghost(p) => p.feature_dim(),
        }
    }

    /// Length of the full state `[h g]`.
    pub fn state_dim(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.state_dim(),
            CellParams::Ghost(p) => p.full_dim,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            CellParams::Gru(p) => p.state_dim(),
            CellParams::Ghost(p) => p.intrinsic_dim(),
        }
    }

    pub fn ghost_dim(&self) -> usize {
        match self {
            CellParams::Gru(_) => 0,
            CellParams::Ghost(p) => p.ghost_dim(),
        }
    }

    pub fn ratio(&self) -> usize {
        match self {
            CellParams::Gru(_) => 1,
            CellParams::Ghost(p) => p.ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CellParams::Gru(p) => p.validate(),
            CellParams::Ghost(p) => p.validate(),
        }
    }

    /// `h = 0`, `g = φ(0)`.
    pub fn initial_state(&self) -> CellState {
        match self {
            CellParams::Gru(p) => CellState::gru(Vector::zeros(p.state_dim())),
            CellParams::Ghost(p) => {
                let h = Vector::zeros(p.intrinsic_dim());
                let g = cheap_apply(&p.phi, &h).expect("phi shape validated");
                CellState { h, g }
            }
        }
    }

    pub fn step(&self, x: &[f64], s_prev: &CellState) -> Result<CellState> {
        match self {
            CellParams::Gru(p) => Ok(CellState::gru(gru_step(p, x, &s_prev.h)?)),
            CellParams::Ghost(p) => ghost_step(p, x, s_prev),
        }
    }

    pub(crate) fn view(&self) -> CellView<'_> {
        match self {
            CellParams::Gru(p) => p.view(),
            CellParams::Ghost(p) => p.view(),
        }
    }
}

impl Parameters for CellParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        match self {
            CellParams::Gru(p) => p.tensors(),
            CellParams::Ghost(p) => p.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            CellParams::Gru(p) => p.tensors_mut(),
            CellParams::Ghost(p) => p.tensors_mut(),
        }
    }
}

/// Intrinsic and ghost states after one step. `g` is empty for a GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub g: Vector,
}

impl CellState {
    pub fn gru(h: Vector) -> Self {
        Self {
            h,
            g: Vector::zeros(0),
        }
    }

    /// The concatenated state `[h g]`.
    pub fn full(&self) -> Vector {
        self.h.concat(&self.g)
    }
}

pub(crate) struct GhostView<'a> {
    pub w_gc: &'a Matrix,
    pub b_gc: &'a [f64],
    pub phi: &'a CheapOp,
}

/// Borrowed view shared by both cells so the forward arithmetic is one code
/// path; a ratio-1 GhostRNN therefore reproduces a GRU bit for bit.
pub(crate) struct CellView<'a> {
    pub w_ir: &'a Matrix,
    pub w_iz: &'a Matrix,
    pub w_ic: &'a Matrix,
    pub w_hr: &'a Matrix,
    pub w_hz: &'a Matrix,
    pub w_hc: &'a Matrix,
    pub b_ir: &'a [f64],
    pub b_iz: &'a [f64],
    pub b_ic: &'a [f64],
    pub b_hr: &'a [f64],
    pub b_hz: &'a [f64],
    pub b_hc: &'a [f64],
    pub ghost: Option<GhostView<'a>>,
}

/// Everything one step computes; the backward pass reads it from the tape.
#[derive(Clone, Debug)]
pub(crate) struct StepTrace {
    pub r: Vector,
    pub z: Vector,
    /// `W_hc h_prev + b_hc`, the reset-gated term.
    pub n: Vector,
    pub c: Vector,
    pub h: Vector,
    /// Pre-activation of φ; empty for a GRU.
    pub phi_pre: Vector,
    pub g: Vector,
}

pub(crate) fn step_trace(
    v: &CellView<'_>,
    x: &[f64],
    h_prev: &[f64],
    g_prev: &[f64],
) -> Result<StepTrace> {
    let k = v.w_ir.rows();
    check_len("input x", x.len(), v.w_ir.cols())?;
    check_len("previous intrinsic state", h_prev.len(), k)?;
    let ghost_dim = v.ghost.as_ref().map_or(0, |gv| gv.w_gc.cols());
    check_len("previous ghost state", g_prev.len(), ghost_dim)?;

    let hg: Vec<f64>;
    let recurrent_in: &[f64] = if g_prev.is_empty() {
        h_prev
    } else {
        hg = [h_prev, g_prev].concat();
        &hg
    };

    let gate = |w_i: &Matrix, b_i: &[f64], w_h: &Matrix, b_h: &[f64]| -> Result<Vector> {
        let xi = matvec(w_i, x)?;
        let hh = matvec(w_h, recurrent_in)?;
        Ok((0..k)
            .map(|j| sigmoid(xi[j] + b_i[j] + hh[j] + b_h[j]))
            .collect::<Vec<_>>()
            .into())
    };
    let r = gate(v.w_ir, v.b_ir, v.w_hr, v.b_hr)?;
    let z = gate(v.w_iz, v.b_iz, v.w_hz, v.b_hz)?;

    let mut n = matvec(v.w_hc, h_prev)?;
    for (nj, bj) in n.iter_mut().zip(v.b_hc) {
        *nj += bj;
    }
    let xc = matvec(v.w_ic, x)?;
    let mut a: Vec<f64> = (0..k).map(|j| xc[j] + v.b_ic[j] + r[j] * n[j]).collect();
    if let Some(gv) = &v.ghost {
        if ghost_dim > 0 {
            let gc = matvec(gv.w_gc, g_prev)?;
            a.iter_mut().zip(gc.iter()).for_each(|(aj, gj)| *aj += gj);
        }
        a.iter_mut().zip(gv.b_gc).for_each(|(aj, bj)| *aj += bj);
    }
    let c: Vector = a.iter().map(|v| v.tanh()).collect::<Vec<_>>().into();
    let h: Vector = (0..k)
        .map(|j| (1.0 - z[j]) * c[j] + z[j] * h_prev[j])
        .collect::<Vec<_>>()
        .into();

    let (phi_pre, g) = match &v.ghost {
        Some(gv) if ghost_dim > 0 => {
            let pre = gv.phi.pre_activation(&h)?;
            let g: Vector = pre
                .iter()
                .map(|&p| gv.phi.activation.apply(p))
                .collect::<Vec<_>>()
                .into();
            (pre, g)
        }
        _ => (Vector::zeros(0), Vector::zeros(0)),
    };
    Ok(StepTrace {
        r,
        z,
        n,
        c,
        h,
        phi_pre,
        g,
    })
}

/// One GRU step; returns `h_t`.
pub fn gru_step(p: &GruParams, x: &[f64], h_prev: &[f64]) -> Result<Vector> {
    Ok(step_trace(&p.view(), x, h_prev, &[])?.h)
}

/// One GhostRNN step; returns `(h_t, g_t)`.
pub fn ghost_step(p: &GhostParams, x: &[f64], s_prev: &CellState) -> Result<CellState> {
    let t = step_trace(&p.view(), x, &s_prev.h, &s_prev.g)?;
    Ok(CellState { h: t.h, g: t.g })
}

/// Runs the cell over `xs` from `s0` (default: [`CellParams::initial_state`]).
///
/// Returns every state together with the feature map whose column `t` is the
/// full state `[h g]` after step `t`.
pub fn run_sequence(
    cell: &CellParams,
    xs: &[Vector],
    s0: Option<&CellState>,
) -> Result<(Vec<CellState>, FeatureMap)> {
    if xs.is_empty() {
        return Err(Error::Empty("run_sequence needs at least one input".into()));
    }
    let mut state = match s0 {
        Some(s) => s.clone(),
        None => cell.initial_state(),
    };
    let mut states = Vec::with_capacity(xs.len());
    for x in xs {
        state = cell.step(x, &state)?;
        states.push(state.clone());
    }
    let fm = FeatureMap::from_states(&states)?;
    Ok((states, fm))
}
