//! Reverse-mode differentiation through time for both cells.
//!
//! The forward pass records a [`Tape`] of every step's gates and
//! intermediates; [`bptt`] walks it backwards. For GhostRNN the ghost state
//! feeds the next step's gates and candidate, so its gradient flows back
//! through `φ` into the intrinsic state that produced it.

use crate::cells::{step_trace, CellParams, CellState, StepTrace};
use crate::error::{Error, Result};
use crate::linalg::{matvec_t_acc, Matrix, Vector};
use crate::params::Parameters;

#[derive(Clone, Debug)]
pub(crate) struct TapeStep {
    pub x: Vector,
    pub h_prev: Vector,
    pub g_prev: Vector,
    pub trace: StepTrace,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub(crate) steps: Vec<TapeStep>,
    /// The initial ghost state was computed as `φ(h0)` rather than supplied.
    pub(crate) g0_from_phi: bool,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn reset_gate(&self, t: usize) -> &[f64] {
        &self.steps[t].trace.r
    }

    pub fn update_gate(&self, t: usize) -> &[f64] {
        &self.steps[t].trace.z
    }

    pub fn candidate(&self, t: usize) -> &[f64] {
        &self.steps[t].trace.c
    }

    /// Pre-activation of the cheap operation; empty for a GRU.
    pub fn phi_pre_activation(&self, t: usize) -> &[f64] {
        &self.steps[t].trace.phi_pre
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.steps[t].x
    }

    pub fn previous_state(&self, t: usize) -> CellState {
        CellState {
            h: self.steps[t].h_prev.clone(),
            g: self.steps[t].g_prev.clone(),
        }
    }
}

/// Gradients shaped like the parameter bundle, plus the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: CellParams,
    /// Total derivative w.r.t. `h0`. When `g0 = φ(h0)` this includes the
    /// path through `φ`.
    pub d_h0: Vector,
    /// Derivative w.r.t. the initial ghost state taken as a free input.
    pub d_g0: Vector,
}

impl Gradients {
    pub fn zeros_like(cell: &CellParams) -> Self {
        let mut params = cell.clone();
        for t in params.tensors_mut() {
            t.fill(0.0);
        }
        Self {
            params,
            d_h0: Vector::zeros(cell.intrinsic_dim()),
            d_g0: Vector::zeros(cell.ghost_dim()),
        }
    }
}

/// Same states as [`crate::cells::run_sequence`], plus the tape.
pub fn forward_with_tape(
    cell: &CellParams,
    xs: &[Vector],
    s0: Option<&CellState>,
) -> Result<(Vec<CellState>, Tape)> {
    if xs.is_empty() {
        return Err(Error::Empty("forward_with_tape needs at least one input".into()));
    }
    let view = cell.view();
    let mut state = match s0 {
        Some(s) => s.clone(),
        None => cell.initial_state(),
    };
    let mut states = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let trace = step_trace(&view, x, &state.h, &state.g)?;
        let next = CellState {
            h: trace.h.clone(),
            g: trace.g.clone(),
        };
        let prev = std::mem::replace(&mut state, next.clone());
        steps.push(TapeStep {
            x: x.clone(),
            h_prev: prev.h,
            g_prev: prev.g,
            trace,
        });
        states.push(next);
    }
    Ok((
        states,
        Tape {
            steps,
            g0_from_phi: s0.is_none(),
        },
    ))
}

struct GradRefs<'a> {
    w_ir: &'a mut Matrix,
    w_iz: &'a mut Matrix,
    w_ic: &'a mut Matrix,
    w_hr: &'a mut Matrix,
    w_hz: &'a mut Matrix,
    w_hc: &'a mut Matrix,
    b_ir: &'a mut [f64],
    b_iz: &'a mut [f64],
    b_ic: &'a mut [f64],
    b_hr: &'a mut [f64],
    b_hz: &'a mut [f64],
    b_hc: &'a mut [f64],
    ghost: Option<GhostGradRefs<'a>>,
}

struct GhostGradRefs<'a> {
    w_gc: &'a mut Matrix,
    b_gc: &'a mut [f64],
    w_phi: &'a mut Matrix,
    b_phi: &'a mut [f64],
}

fn grad_refs(p: &mut CellParams) -> GradRefs<'_> {
    match p {
        CellParams::Gru(g) => GradRefs {
            w_ir: &mut g.w_ir,
            w_iz: &mut g.w_iz,
            w_ic: &mut g.w_ic,
            w_hr: &mut g.w_hr,
            w_hz: &mut g.w_hz,
            w_hc: &mut g.w_hc,
            b_ir: &mut g.b_ir,
            b_iz: &mut g.b_iz,
            b_ic: &mut g.b_ic,
            b_hr: &mut g.b_hr,
            b_hz: &mut g.b_hz,
            b_hc: &mut g.b_hc,
            ghost: None,
        },
        CellParams::Ghost(g) => GradRefs {
            w_ir: &mut g.w_ir,
            w_iz: &mut g.w_iz,
            w_ic: &mut g.w_ic,
            w_hr: &mut g.w_hr,
            w_hz: &mut g.w_hz,
            w_hc: &mut g.w_hc,
            b_ir: &mut g.b_ir,
            b_iz: &mut g.b_iz,
            b_ic: &mut g.b_ic,
            b_hr: &mut g.b_hr,
            b_hz: &mut g.b_hz,
            b_hc: &mut g.b_hc,
            ghost: Some(GhostGradRefs {
                w_gc: &mut g.w_gc,
                b_gc: &mut g.b_gc,
                w_phi: &mut g.phi.w_phi,
                b_phi: &mut g.phi.b_phi,
            }),
        },
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Exact gradients of a loss whose derivative w.r.t. the full output state
/// `[h_t g_t]` at each step is `d_states[t]`.
pub fn bptt(cell: &CellParams, tape: &Tape, d_states: &[Vector]) -> Result<Gradients> {
    if d_states.len() != tape.len() {
        return Err(Error::Shape(format!(
            "bptt: {} state gradients for a tape of length {}",
            d_states.len(),
            tape.len()
        )));
    }
    let k = cell.intrinsic_dim();
    let q = cell.ghost_dim();
    let view = cell.view();
    let mut grads = Gradients::zeros_like(cell);
    let gr = grad_refs(&mut grads.params);
    let GradRefs {
        w_ir: dw_ir,
        w_iz: dw_iz,
        w_ic: dw_ic,
        w_hr: dw_hr,
        w_hz: dw_hz,
        w_hc: dw_hc,
        b_ir: db_ir,
        b_iz: db_iz,
        b_ic: db_ic,
        b_hr: db_hr,
        b_hz: db_hz,
        b_hc: db_hc,
        mut ghost,
    } = gr;

    let mut dh_carry = vec![0.0; k];
    let mut dg_carry = vec![0.0; q];

    for (t, step) in tape.steps.iter().enumerate().rev() {
        let ds = &d_states[t];
        if ds.len() != k + q {
            return Err(Error::Shape(format!(
                "bptt: state gradient {t} has length {}, expected {}",
                ds.len(),
                k + q
            )));
        }
        let tr = &step.trace;
        let mut dh: Vec<f64> = (0..k).map(|j| ds[j] + dh_carry[j]).collect();

        if q > 0 {
            let gv = view.ghost.as_ref().expect("ghost dims imply ghost view");
            let gg = ghost.as_mut().expect("ghost grads");
            let da_g: Vec<f64> = (0..q)
                .map(|j| (ds[k + j] + dg_carry[j]) * gv.phi.activation.derivative_from_output(tr.g[j]))
                .collect();
            gg.w_phi.add_outer(&da_g, &tr.h);
            add_into(gg.b_phi, &da_g);
            matvec_t_acc(&gv.phi.w_phi, &da_g, &mut dh);
        }

        // h = (1 - z) c + z h_prev
        let mut dh_prev: Vec<f64> = (0..k).map(|j| dh[j] * tr.z[j]).collect();
        let da_c: Vec<f64> = (0..k)
            .map(|j| dh[j] * (1.0 - tr.z[j]) * (1.0 - tr.c[j] * tr.c[j]))
            .collect();
        let da_z: Vec<f64> = (0..k)
            .map(|j| dh[j] * (step.h_prev[j] - tr.c[j]) * tr.z[j] * (1.0 - tr.z[j]))
            .collect();

        dw_ic.add_outer(&da_c, &step.x);
        add_into(db_ic, &da_c);

        // reset gate multiplies n = W_hc h_prev + b_hc
        let dn: Vec<f64> = (0..k).map(|j| da_c[j] * tr.r[j]).collect();
        let da_r: Vec<f64> = (0..k)
            .map(|j| da_c[j] * tr.n[j] * tr.r[j] * (1.0 - tr.r[j]))
            .collect();
        dw_hc.add_outer(&dn, &step.h_prev);
        add_into(db_hc, &dn);
        matvec_t_acc(view.w_hc, &dn, &mut dh_prev);

        let mut dg_prev = vec![0.0; q];
        if let (Some(gv), Some(gg)) = (view.ghost.as_ref(), ghost.as_mut()) {
            gg.w_gc.add_outer(&da_c, &step.g_prev);
            add_into(gg.b_gc, &da_c);
            if q > 0 {
                matvec_t_acc(gv.w_gc, &da_c, &mut dg_prev);
            }
        }

        let hg = step.h_prev.concat(&step.g_prev);
        dw_ir.add_outer(&da_r, &step.x);
        add_into(db_ir, &da_r);
        add_into(db_hr, &da_r);
        dw_hr.add_outer(&da_r, &hg);
        dw_iz.add_outer(&da_z, &step.x);
        add_into(db_iz, &da_z);
        add_into(db_hz, &da_z);
        dw_hz.add_outer(&da_z, &hg);

        let mut dhg = vec![0.0; k + q];
        matvec_t_acc(view.w_hr, &da_r, &mut dhg);
        matvec_t_acc(view.w_hz, &da_z, &mut dhg);
        add_into(&mut dh_prev, &dhg[..k]);
        add_into(&mut dg_prev, &dhg[k..]);

        dh_carry = dh_prev;
        dg_carry = dg_prev;
    }

    let d_g0 = dg_carry;
    if tape.g0_from_phi && q > 0 {
        let gv = view.ghost.as_ref().expect("ghost view");
        let gg = ghost.as_mut().expect("ghost grads");
        let first = &tape.steps[0];
        let da: Vec<f64> = (0..q)
            .map(|j| d_g0[j] * gv.phi.activation.derivative_from_output(first.g_prev[j]))
            .collect();
        gg.w_phi.add_outer(&da, &first.h_prev);
        add_into(gg.b_phi, &da);
        matvec_t_acc(&gv.phi.w_phi, &da, &mut dh_carry);
    }
    grads.d_h0 = dh_carry.into();
    grads.d_g0 = d_g0.into();
    Ok(grads)
}

/// Mean squared error and its gradient `2 (pred - target) / len`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vector)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse_loss: prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect::<Vec<_>>();
    Ok((loss, grad.into()))
}

/// `-log softmax(logits)[class]` and its gradient `softmax - onehot`.
pub fn cross_entropy_loss(logits: &[f64], class: usize) -> Result<(f64, Vector)> {
    if class >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[class] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[class] -= 1.0;
    Ok((loss, grad.into()))
}

/// A loss over the sequence of output states, returning the loss and its
/// derivative w.r.t. each full state.
pub trait SequenceLoss {
    fn evaluate(&self, states: &[CellState]) -> Result<(f64, Vec<Vector>)>;
}

fn zero_grads(states: &[CellState]) -> Vec<Vector> {
    states
        .iter()
        .map(|s| Vector::zeros(s.h.len() + s.g.len()))
        .collect()
}

/// MSE between the final full state and a target.
#[derive(Clone, Debug)]
pub struct FinalStateMse {
    pub target: Vector,
}

impl SequenceLoss for FinalStateMse {
    fn evaluate(&self, states: &[CellState]) -> Result<(f64, Vec<Vector>)> {
        let last = states
            .last()
            .ok_or_else(|| Error::Empty("loss over no states".into()))?;
        let (loss, g) = mse_loss(&last.full(), &self.target)?;
        let mut grads = zero_grads(states);
        *grads.last_mut().expect("nonempty") = g;
        Ok((loss, grads))
    }
}

/// Cross-entropy with the final full state used directly as logits.
#[derive(Clone, Debug)]
pub struct FinalStateCrossEntropy {
    pub class: usize,
}

impl SequenceLoss for FinalStateCrossEntropy {
    fn evaluate(&self, states: &[CellState]) -> Result<(f64, Vec<Vector>)> {
        let last = states
            .last()
            .ok_or_else(|| Error::Empty("loss over no states".into()))?;
        let (loss, g) = cross_entropy_loss(&last.full(), self.class)?;
        let mut grads = zero_grads(states);
        *grads.last_mut().expect("nonempty") = g;
        Ok((loss, grads))
    }
}

/// Sum over steps of the MSE between each full state and its target.
#[derive(Clone, Debug)]
pub struct StepwiseMse {
    pub targets: Vec<Vector>,
}

impl SequenceLoss for StepwiseMse {
    fn evaluate(&self, states: &[CellState]) -> Result<(f64, Vec<Vector>)> {
        if states.len() != self.targets.len() {
            return Err(Error::Shape(format!(
                "{} states for {} targets",
                states.len(),
                self.targets.len()
            )));
        }
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(states.len());
        for (s, target) in states.iter().zip(&self.targets) {
            let (l, g) = mse_loss(&s.full(), target)?;
            total += l;
            grads.push(g);
        }
        Ok((total, grads))
    }
}

fn sequence_loss(cell: &CellParams, xs: &[Vector], loss: &dyn SequenceLoss) -> Result<f64> {
    let (states, _) = crate::cells::run_sequence(cell, xs, None)?;
    let (l, _) = loss.evaluate(&states)?;
    if !l.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {l}")));
    }
    Ok(l)
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic − numeric|` over all entries.
    pub max_abs_error: f64,
    /// Tensor name and flat index of the entry with the largest relative error.
    pub worst: Option<(&'static str, usize)>,
    pub entries: usize,
}

/// Compares [`bptt`] against central differences on every parameter entry
/// and returns the largest relative error. `eps` should normally lie in
/// `[1e-7, 1e-3]`; larger steps are accepted so that a discretization-bound
/// check can be demonstrated.
pub fn grad_check(
    cell: &CellParams,
    xs: &[Vector],
    loss: &dyn SequenceLoss,
    eps: f64,
) -> Result<f64> {
    grad_check_report(cell, xs, loss, eps).map(|r| r.max_rel_error)
}

/// [`grad_check`] with absolute errors and the location of the worst entry.
pub fn grad_check_report(
    cell: &CellParams,
    xs: &[Vector],
    loss: &dyn SequenceLoss,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1], got {eps}")));
    }
    let (states, tape) = forward_with_tape(cell, xs, None)?;
    let (l0, d_states) = loss.evaluate(&states)?;
    if !l0.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {l0}")));
    }
    let grads = bptt(cell, &tape, &d_states)?;
    let analytic = grads.params.flat_values();

    let mut probe = cell.clone();
    let names: Vec<&'static str> = probe.tensors().iter().map(|t| t.name).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        entries: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        let len = probe.tensors()[ti].values.len();
        for e in 0..len {
            let orig = probe.tensors()[ti].values[e];
            probe.tensors_mut()[ti][e] = orig + eps;
            let plus = sequence_loss(&probe, xs, loss)?;
            probe.tensors_mut()[ti][e] = orig - eps;
            let minus = sequence_loss(&probe, xs, loss)?;
            probe.tensors_mut()[ti][e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[report.entries];
            let rel = relative_error(a, numeric);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name, e));
            }
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.entries += 1;
        }
    }
    Ok(report)
}
