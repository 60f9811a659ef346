//! Step functions against per-element scalar transcriptions of the cell
//! equations, plus structural properties of both cells.

use ghostrnn::cells::{cheap_apply, ghost_step, gru_step, run_sequence, CheapOp};
use ghostrnn::redundancy::collect_feature_map;
use ghostrnn::{
    Activation, CellKind, CellParams, CellState, GhostParams, GruParams, Matrix, Parameters,
    RngState, Vector,
};
use proptest::prelude::*;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_dot(w: &Matrix, i: usize, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..w.cols() {
        acc += w[(i, j)] * x[j];
    }
    acc
}

fn random_vec(rng: &mut RngState, n: usize, lo: f64, hi: f64) -> Vector {
    (0..n).map(|_| rng.uniform(lo, hi).unwrap()).collect::<Vec<_>>().into()
}

fn gru_oracle(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let s = h.len();
    let mut out = vec![0.0; s];
    for i in 0..s {
        let r = sig(row_dot(&p.w_ir, i, x) + p.b_ir[i] + row_dot(&p.w_hr, i, h) + p.b_hr[i]);
        let z = sig(row_dot(&p.w_iz, i, x) + p.b_iz[i] + row_dot(&p.w_hz, i, h) + p.b_hz[i]);
        let c = (row_dot(&p.w_ic, i, x) + p.b_ic[i] + r * (row_dot(&p.w_hc, i, h) + p.b_hc[i])).tanh();
        out[i] = (1.0 - z) * c + z * h[i];
    }
    out
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => sig(v),
        Activation::Identity => v,
    }
}

fn ghost_oracle(p: &GhostParams, x: &[f64], h: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = h.len();
    let hg: Vec<f64> = h.iter().chain(g).copied().collect();
    let mut h_new = vec![0.0; k];
    for i in 0..k {
        let r = sig(row_dot(&p.w_ir, i, x) + p.b_ir[i] + row_dot(&p.w_hr, i, &hg) + p.b_hr[i]);
        let z = sig(row_dot(&p.w_iz, i, x) + p.b_iz[i] + row_dot(&p.w_hz, i, &hg) + p.b_hz[i]);
        let c = (row_dot(&p.w_ic, i, x)
            + p.b_ic[i]
            + r * (row_dot(&p.w_hc, i, h) + p.b_hc[i])
            + row_dot(&p.w_gc, i, g)
            + p.b_gc[i])
            .tanh();
        h_new[i] = (1.0 - z) * c + z * h[i];
    }
    let q = g.len();
    let mut g_new = vec![0.0; q];
    for i in 0..q {
        g_new[i] = act(p.phi.activation, row_dot(&p.phi.w_phi, i, &h_new) + p.phi.b_phi[i]);
    }
    (h_new, g_new)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gru_step_matches_scalar_oracle_seed_1337() {
    let mut rng = RngState::new(1337);
    let mut p = GruParams::init(3, 4, &mut rng);
    p.fill_uniform(&mut rng, -1.0, 1.0);
    let x = random_vec(&mut rng, 3, -1.0, 1.0);
    let h = random_vec(&mut rng, 4, -1.0, 1.0);
    let got = gru_step(&p, &x, &h).unwrap();
    assert!(max_diff(&got, &gru_oracle(&p, &x, &h)) <= 1e-14);
}

#[test]
fn ghost_step_matches_scalar_oracle_seed_1337() {
    let mut rng = RngState::new(1337);
    let mut p = GhostParams::init(3, 6, 2, Activation::Tanh, &mut rng).unwrap();
    p.fill_uniform(&mut rng, -1.0, 1.0);
    let x = random_vec(&mut rng, 3, -1.0, 1.0);
    let h = random_vec(&mut rng, 3, -1.0, 1.0);
    let g = random_vec(&mut rng, 3, -1.0, 1.0);
    let out = ghost_step(&p, &x, &CellState { h: h.clone(), g: g.clone() }).unwrap();
    let (h_o, g_o) = ghost_oracle(&p, &x, &h, &g);
    assert!(max_diff(&out.h, &h_o) <= 1e-14);
    assert!(max_diff(&out.g, &g_o) <= 1e-14);
}

#[test]
fn ghost_step_oracle_all_activations() {
    for (i, a) in [Activation::Tanh, Activation::Sigmoid, Activation::Identity].into_iter().enumerate() {
        let mut rng = RngState::new(500 + i as u64);
        let mut p = GhostParams::init(2, 8, 4, a, &mut rng).unwrap();
        p.fill_uniform(&mut rng, -1.0, 1.0);
        let x = random_vec(&mut rng, 2, -1.0, 1.0);
        let h = random_vec(&mut rng, 2, -1.0, 1.0);
        let g = random_vec(&mut rng, 6, -1.0, 1.0);
        let out = ghost_step(&p, &x, &CellState { h: h.clone(), g: g.clone() }).unwrap();
        let (h_o, g_o) = ghost_oracle(&p, &x, &h, &g);
        assert!(max_diff(&out.h, &h_o) <= 1e-14);
        assert!(max_diff(&out.g, &g_o) <= 1e-14);
    }
}

#[test]
fn cheap_apply_matches_formula_seed_7() {
    let mut rng = RngState::new(7);
    let mut phi = CheapOp::zeros(4, 5, Activation::Tanh);
    for v in phi.w_phi.as_mut_slice().iter_mut().chain(phi.b_phi.iter_mut()) {
        *v = rng.uniform(-1.0, 1.0).unwrap();
    }
    let h = random_vec(&mut rng, 4, -1.0, 1.0);
    let got = cheap_apply(&phi, &h).unwrap();
    for i in 0..5 {
        let expect = (row_dot(&phi.w_phi, i, &h) + phi.b_phi[i]).tanh();
        assert!((got[i] - expect).abs() <= 1e-15);
    }
}

#[test]
fn zero_parameter_cases() {
    let p = GruParams::zeros(2, 3);
    let v = [0.4, -0.8, 1.0];
    assert_eq!(gru_step(&p, &[5.0, -3.0], &v).unwrap().as_slice(), &[0.2, -0.4, 0.5]);
    assert_eq!(gru_step(&p, &[0.0, 0.0], &[0.0; 3]).unwrap().as_slice(), &[0.0; 3]);

    let gp = GhostParams::zeros(2, 4, 2, Activation::Tanh).unwrap();
    let out = ghost_step(
        &gp,
        &[1.0, 1.0],
        &CellState {
            h: vec![0.6, -0.2].into(),
            g: vec![0.3, 0.9].into(),
        },
    )
    .unwrap();
    assert_eq!(out.h.as_slice(), &[0.3, -0.1]);
    assert_eq!(out.g.as_slice(), &[0.0, 0.0]);
}

#[test]
fn identity_cheap_op_copies_state() {
    let mut phi = CheapOp::zeros(3, 3, Activation::Identity);
    phi.w_phi = Matrix::identity(3);
    assert_eq!(cheap_apply(&phi, &[0.1, -2.0, 7.0]).unwrap().as_slice(), &[0.1, -2.0, 7.0]);
}

#[test]
fn geometric_decay_and_single_step_sequence() {
    let cell = CellParams::Gru(GruParams::zeros(1, 2));
    let xs: Vec<Vector> = vec![vec![1.0].into(); 3];
    let s0 = CellState::gru(vec![1.0, -2.0].into());
    let (states, _) = run_sequence(&cell, &xs, Some(&s0)).unwrap();
    let hs: Vec<&[f64]> = states.iter().map(|s| s.h.as_slice()).collect();
    assert_eq!(hs, vec![&[0.5, -1.0][..], &[0.25, -0.5][..], &[0.125, -0.25][..]]);

    let mut rng = RngState::new(3);
    let cell = CellParams::init(CellKind::Ghost, 2, 4, 2, Activation::Tanh, &mut rng).unwrap();
    let x: Vector = vec![0.3, -0.1].into();
    let (states, _) = run_sequence(&cell, &[x.clone()], None).unwrap();
    let direct = cell.step(&x, &cell.initial_state()).unwrap();
    assert_eq!(states[0], direct);
}

#[test]
fn ghost_initial_state_is_phi_of_zero() {
    let mut rng = RngState::new(9);
    let mut p = GhostParams::init(2, 6, 3, Activation::Sigmoid, &mut rng).unwrap();
    p.fill_uniform(&mut rng, -1.0, 1.0);
    let expect = cheap_apply(&p.phi, &[0.0, 0.0]).unwrap();
    let cell = CellParams::Ghost(p);
    let s0 = cell.initial_state();
    assert_eq!(s0.h.as_slice(), &[0.0, 0.0]);
    assert_eq!(s0.g, expect);
}

#[test]
fn shape_and_dimension_errors() {
    let p = GruParams::zeros(2, 3);
    assert!(gru_step(&p, &[1.0], &[0.0; 3]).is_err());
    assert!(gru_step(&p, &[1.0, 2.0], &[0.0; 2]).is_err());
    let err = GhostParams::zeros(2, 32, 3, Activation::Tanh).unwrap_err();
    assert!(err.to_string().contains("state-dim not divisible"));
    let cell = CellParams::Gru(p);
    assert!(run_sequence(&cell, &[], None).is_err());
}

#[test]
fn feature_map_columns_are_states() {
    let mut rng = RngState::new(21);
    let cell = CellParams::init(CellKind::Ghost, 3, 4, 2, Activation::Tanh, &mut rng).unwrap();
    let seqs: Vec<Vec<Vector>> = (0..2)
        .map(|_| (0..3).map(|_| random_vec(&mut rng, 3, -1.0, 1.0)).collect())
        .collect();
    let (states, fm) = run_sequence(&cell, &seqs[0], None).unwrap();
    assert_eq!((fm.m(), fm.n()), (4, 3));
    for (t, s) in states.iter().enumerate() {
        let col: Vec<f64> = (0..4).map(|i| fm.values()[(i, t)]).collect();
        assert_eq!(col, s.full().into_vec());
    }
    let both = collect_feature_map(&cell, &seqs, 4096).unwrap();
    assert_eq!((both.m(), both.n()), (4, 6));
    let (second, _) = run_sequence(&cell, &seqs[1], None).unwrap();
    for (t, s) in second.iter().enumerate() {
        let col: Vec<f64> = (0..4).map(|i| both.values()[(i, 3 + t)]).collect();
        assert_eq!(col, s.full().into_vec());
    }
    let one = collect_feature_map(&cell, &seqs[..1], 4096).unwrap();
    assert_eq!((one.m(), one.n()), (4, 3));
}

fn random_gru(seed: u64, f: usize, s: usize) -> GruParams {
    let mut rng = RngState::new(seed);
    let mut p = GruParams::init(f, s, &mut rng);
    p.fill_uniform(&mut rng, -1.5, 1.5);
    p
}

fn random_inputs(seed: u64, f: usize, n: usize) -> Vec<Vector> {
    let mut rng = RngState::new(seed ^ 0xabcdef);
    (0..n).map(|_| random_vec(&mut rng, f, -2.0, 2.0)).collect()
}

#[test]
fn ratio_one_equivalence_100_cases() {
    for case in 0..100u64 {
        let mut rng = RngState::new(case);
        let f = 1 + rng.below(8);
        let s = 1 + rng.below(8);
        let n = 1 + rng.below(20);
        let gru = random_gru(case + 10_000, f, s);
        let ghost = GhostParams::from_gru(&gru);
        assert_eq!(ghost.ghost_dim(), 0);
        let xs = random_inputs(case, f, n);
        let (a, _) = run_sequence(&CellParams::Gru(gru), &xs, None).unwrap();
        let (b, _) = run_sequence(&CellParams::Ghost(ghost), &xs, None).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert!(sb.g.is_empty());
            let bits_a: Vec<u64> = sa.h.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = sb.h.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "case {case}");
        }
    }
}

#[test]
fn ratio_one_init_draws_same_weights() {
    let mut a = RngState::new(77);
    let mut b = RngState::new(77);
    let gru = GruParams::init(5, 6, &mut a);
    let ghost = GhostParams::init(5, 6, 1, Activation::Tanh, &mut b).unwrap();
    assert_eq!(GhostParams::from_gru(&gru), ghost);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_and_states_bounded(seed in 0u64..10_000, f in 1usize..6, k in 1usize..5, r in 1usize..4, n in 1usize..12) {
        let mut rng = RngState::new(seed);
        let mut p = GhostParams::init(f, k * r, r, Activation::Tanh, &mut rng).unwrap();
        p.fill_uniform(&mut rng, -2.0, 2.0);
        let cell = CellParams::Ghost(p.clone());
        let xs: Vec<Vector> = (0..n).map(|_| random_vec(&mut rng, f, -3.0, 3.0)).collect();
        let (states, _) = run_sequence(&cell, &xs, None).unwrap();
        let (_, tape) = ghostrnn::backprop::forward_with_tape(&cell, &xs, None).unwrap();
        for t in 0..n {
            prop_assert!(tape.reset_gate(t).iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(tape.update_gate(t).iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(tape.candidate(t).iter().all(|&v| v > -1.0 && v < 1.0));
            prop_assert!(states[t].h.iter().all(|&v| v.abs() <= 1.0));
            // g depends on h only through φ.
            prop_assert_eq!(&cheap_apply(&p.phi, &states[t].h).unwrap(), &states[t].g);
        }
    }

    #[test]
    fn gru_state_stays_in_unit_box(seed in 0u64..10_000, f in 1usize..6, s in 1usize..8) {
        let p = random_gru(seed, f, s);
        let mut rng = RngState::new(seed + 1);
        let h = random_vec(&mut rng, s, -1.0, 1.0);
        let x = random_vec(&mut rng, f, -5.0, 5.0);
        let out = gru_step(&p, &x, &h).unwrap();
        prop_assert!(out.iter().all(|v| v.abs() <= 1.0));
    }
}
