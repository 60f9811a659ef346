use ghostrnn::metrics::{improvement, si_sdr, MetricKind, SignalMetric};
use ghostrnn::model::{argmax, Prediction};
use ghostrnn::params::{TensorRef, TensorShape};
use ghostrnn::rng::derive_seed;
use ghostrnn::tasks::{gen_adding, gen_denoise, gen_order_classify, Dataset, LabeledSequence, Target, TaskKind, TaskSpec};
use ghostrnn::trainer::{
    adam_step, batch_gradient, clip_global_norm, dataset_loss, evaluate, train, train_model,
    train_step, worker_pool, AdamState, TrainConfig,
};
use ghostrnn::{Activation, CellKind, Error, Model, Parameters, RngState};

/// A bare vector of scalars, enough to drive the optimizer.
#[derive(Clone, Debug, PartialEq)]
struct Flat(Vec<f64>);

impl Parameters for Flat {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![TensorRef {
            name: "theta",
            shape: TensorShape::Vector(self.0.len()),
            values: &self.0,
        }]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.0]
    }
}

#[test]
fn adam_matches_scalar_transcription() {
    let (lr, wd) = (1e-2, 1e-3);
    let grads = [0.3, -1.2, 0.05];
    let mut p = Flat(vec![0.7]);
    let mut st = AdamState::new(&p, lr, wd);

    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        adam_step(&mut p, &Flat(vec![g]), &mut st).unwrap();
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        theta -= lr * wd * theta;
        assert!((p.0[0] - theta).abs() <= 1e-15);
    }
    assert_eq!(st.t, 3);
    assert!(st.v[0][0] >= 0.0);
}

#[test]
fn first_step_moves_by_lr_against_the_sign() {
    let mut p = Flat(vec![0.0; 4]);
    let g = Flat(vec![0.5, -2.0, 3.0, -0.1]);
    let mut st = AdamState::new(&p, 1e-3, 0.0);
    adam_step(&mut p, &g, &mut st).unwrap();
    for (theta, gv) in p.0.iter().zip(&g.0) {
        assert!((theta + 1e-3 * gv.signum()).abs() < 1e-3 * 1e-6);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut rng = RngState::new(2);
    let mut model = Model::init(CellKind::Ghost, 3, 8, 2, Activation::Tanh, 2, &mut rng).unwrap();
    let before = model.clone();
    let zeros = model.zeros_like();
    let mut st = AdamState::new(&model, 1e-2, 0.0);
    for _ in 0..3 {
        adam_step(&mut model, &zeros, &mut st).unwrap();
    }
    assert_eq!(model, before);
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut rng = RngState::new(3);
    let mut model = Model::init(CellKind::Gru, 2, 3, 1, Activation::Tanh, 1, &mut rng).unwrap();
    let mut g = model.zeros_like();
    g.readout.bias[0] = f64::NAN;
    let mut st = AdamState::new(&model, 1e-3, 0.0);
    match adam_step(&mut model, &g, &mut st) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("readout.bias"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(adam_step(&mut model, &Model::init(CellKind::Gru, 2, 4, 1, Activation::Tanh, 1, &mut rng).unwrap(), &mut st).is_err());
}

#[test]
fn batch_gradient_is_the_mean_of_sample_gradients() {
    let mut rng = RngState::new(4);
    let model = Model::init(CellKind::Ghost, 2, 6, 3, Activation::Tanh, 1, &mut rng).unwrap();
    let data = gen_adding(9, 7, 12).unwrap();
    let batch: Vec<&LabeledSequence> = data.samples.iter().collect();
    let (loss, grad) = batch_gradient(&model, TaskKind::Adding, &batch, None).unwrap();

    let mut mean_loss = 0.0;
    let mut mean = vec![0.0; model.total_count()];
    for s in &batch {
        let (l, g) = model.loss_and_grad(TaskKind::Adding, s).unwrap();
        mean_loss += l / 7.0;
        for (acc, v) in mean.iter_mut().zip(g.flat_values()) {
            *acc += v / 7.0;
        }
    }
    assert!((loss - mean_loss).abs() < 1e-14);
    for (a, b) in grad.flat_values().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(batch_gradient(&model, TaskKind::Adding, &[], None).is_err());
}

#[test]
fn train_step_is_gradient_clip_then_adam() {
    let mut rng = RngState::new(5);
    let model = Model::init(CellKind::Ghost, 3, 8, 2, Activation::Tanh, 4, &mut rng).unwrap();
    let data = gen_order_classify(10, 6, 10, 4).unwrap();
    let batch: Vec<&LabeledSequence> = data.samples.iter().collect();

    let mut a = model.clone();
    let mut adam_a = AdamState::new(&a, 5e-3, 1e-5);
    let loss = train_step(&mut a, TaskKind::Order, &batch, &mut adam_a, Some(0.05), None).unwrap();

    let mut b = model.clone();
    let mut adam_b = AdamState::new(&b, 5e-3, 1e-5);
    let (l, mut g) = batch_gradient(&b, TaskKind::Order, &batch, None).unwrap();
    let norm = clip_global_norm(&mut g, 0.05);
    assert!(norm > 0.05, "clipping should be active in this case");
    adam_step(&mut b, &g, &mut adam_b).unwrap();

    assert_eq!(loss, l);
    for (x, y) in a.flat_values().iter().zip(b.flat_values()) {
        assert!((x - y).abs() <= 1e-15);
    }
}

fn small_config(threads: usize) -> TrainConfig {
    TrainConfig {
        cell: CellKind::Ghost,
        state_dim: 8,
        ratio: 2,
        task: TaskSpec {
            kind: TaskKind::Adding,
            train_count: 120,
            val_count: 40,
            length: 10,
            n_classes: 4,
        },
        seed: 7,
        batch_size: 16,
        max_epochs: 2,
        initial_lr: 5e-3,
        threads,
        ..Default::default()
    }
}

#[test]
fn training_is_identical_across_thread_counts() {
    let a = train(&small_config(0)).unwrap();
    let b = train(&small_config(3)).unwrap();
    let c = train(&small_config(0)).unwrap();
    assert_eq!(a.history.records, b.history.records);
    assert_eq!(a.history.records, c.history.records);
    assert_eq!(a.best, b.best);
    assert_eq!(a.last, b.last);
    assert_eq!(a.history.records.len(), 2);
    assert_eq!(a.history.records[1].iteration, 16);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let cfg = TrainConfig {
        max_epochs: 0,
        ..small_config(0)
    };
    let out = train(&cfg).unwrap();
    assert!(out.history.records.is_empty());
    let mut rng = RngState::new(derive_seed(7, 1));
    let init = Model::init(CellKind::Ghost, 2, 8, 2, Activation::Tanh, 1, &mut rng).unwrap();
    assert_eq!(out.best, init);
    assert_eq!(out.last, init);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    // A large step size makes validation loss bounce, which exercises the
    // patience counter.
    let cfg = TrainConfig {
        max_epochs: 30,
        initial_lr: 0.3,
        clip_norm: None,
        early_stop_patience: 2,
        ..small_config(0)
    };
    let (_, val_set) = cfg.task.splits(cfg.seed).unwrap();
    let out = train(&cfg).unwrap();
    let recs = &out.history.records;
    let best = out.history.best().unwrap();
    assert_eq!(dataset_loss(&out.best, &val_set, None).unwrap(), best.val_loss);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
    }
    assert!(recs.len() < 30, "patience never triggered");
    let tail = &recs[recs.len() - 2..];
    assert!(tail.iter().all(|r| r.val_loss >= best.val_loss));
    assert_eq!(best.epoch, recs.len() - 2);
}

#[test]
fn train_model_rejects_mismatched_dims() {
    let cfg = small_config(0);
    let (train_set, val_set) = cfg.task.splits(1).unwrap();
    let mut rng = RngState::new(1);
    let mut wrong = Model::init(CellKind::Ghost, 3, 8, 2, Activation::Tanh, 1, &mut rng).unwrap();
    assert!(matches!(train_model(&cfg, &mut wrong, &train_set, &val_set), Err(Error::Shape(_))));
}

#[test]
fn argmax_is_invariant_to_positive_logit_scaling() {
    let mut rng = RngState::new(6);
    let model = Model::init(CellKind::Ghost, 3, 8, 2, Activation::Tanh, 4, &mut rng).unwrap();
    let data = gen_order_classify(11, 40, 12, 4).unwrap();
    for c in [1e-3, 0.5, 7.0, 1e3] {
        let mut scaled = model.clone();
        scaled.readout.weight.as_mut_slice().iter_mut().for_each(|w| *w *= c);
        scaled.readout.bias.iter_mut().for_each(|b| *b *= c);
        for s in &data.samples {
            let a = model.predict(TaskKind::Order, &s.inputs).unwrap().class();
            let b = scaled.predict(TaskKind::Order, &s.inputs).unwrap().class();
            assert_eq!(a, b);
        }
    }
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
    assert_eq!(argmax(&[]), None);
}

#[test]
fn perfect_classifier_scores_one() {
    let mut rng = RngState::new(7);
    let model = Model::init(CellKind::Ghost, 3, 8, 2, Activation::Tanh, 4, &mut rng).unwrap();
    let mut data = gen_order_classify(12, 30, 12, 4).unwrap();
    for s in &mut data.samples {
        let c = model.predict(TaskKind::Order, &s.inputs).unwrap().class().unwrap();
        s.target = Target::Class(c);
    }
    let v = evaluate(&model, &data, &[MetricKind::Accuracy], None).unwrap();
    assert_eq!(v[0].value, 1.0);
}

#[test]
fn evaluate_matches_per_sample_recomputation() {
    let mut rng = RngState::new(8);
    let model = Model::init(CellKind::Ghost, 16, 8, 2, Activation::Tanh, 16, &mut rng).unwrap();
    let data = gen_denoise(13, 5, 64).unwrap();
    let kinds = [MetricKind::SiSdr, MetricKind::SiSdri, MetricKind::Sdri, MetricKind::Mse];
    let got = evaluate(&model, &data, &kinds, None).unwrap();

    let (mut si, mut sii, mut sdri, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for s in &data.samples {
        let Prediction::Signal(est) = model.predict(TaskKind::Denoise, &s.inputs).unwrap() else {
            unreachable!()
        };
        let clean = s.clean_signal().unwrap();
        let mix = s.mixture_signal();
        si += si_sdr(&est, &clean).unwrap() / 5.0;
        sii += improvement(SignalMetric::SiSdr, &est, &mix, &clean).unwrap() / 5.0;
        sdri += improvement(SignalMetric::Sdr, &est, &mix, &clean).unwrap() / 5.0;
        mse += est.iter().zip(&clean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0 / 5.0;
    }
    for (v, e) in got.iter().zip([si, sii, sdri, mse]) {
        assert!((v.value - e).abs() < 1e-9, "{:?}: {} vs {e}", v.kind, v.value);
    }
    // The per-step loss used for training is the same MSE.
    assert!((dataset_loss(&model, &data, None).unwrap() - mse).abs() < 1e-12);
    assert!(evaluate(&model, &data, &[MetricKind::Accuracy], None).is_err());
}

#[test]
fn evaluate_rejects_wrong_dims_and_empty_sets() {
    let mut rng = RngState::new(9);
    let model = Model::init(CellKind::Gru, 2, 4, 1, Activation::Tanh, 1, &mut rng).unwrap();
    let order = gen_order_classify(1, 4, 6, 4).unwrap();
    assert!(evaluate(&model, &order, &[MetricKind::Accuracy], None).is_err());
    let empty = Dataset {
        samples: vec![],
        ..gen_adding(1, 1, 5).unwrap()
    };
    assert!(evaluate(&model, &empty, &[MetricKind::Mse], None).is_err());
    assert!(worker_pool(0).unwrap().is_none());
}
