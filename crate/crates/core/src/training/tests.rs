use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{build_scenario, Domain, ScenarioKind, ScenarioSpec, Split};

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch_source: 16,
        batch_target: 16,
        total_steps: 30,
        eval_every: 10,
        validation_size: 50,
        feature_dim: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn moons(seed: u64) -> crate::data::Scenario {
    let spec = ScenarioSpec {
        kind: ScenarioKind::TwoMoonsRotate { angle: 30.0, noise: 0.1 },
        n_source: 200,
        n_target: 200,
        n_test: 100,
        seed,
    };
    build_scenario(&spec, 50).unwrap()
}

fn data(sc: &crate::data::Scenario) -> TrainingData<'_> {
    TrainingData { source: &sc.source, target: &sc.target_train, validation: &sc.validation }
}

fn random_batch(rng: &mut ChaCha8Rng, ns: usize, nt: usize, width: usize, classes: usize) -> Batch {
    let m = |r: usize, rng: &mut ChaCha8Rng| {
        Tensor::matrix(r, width, (0..r * width).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    Batch { xs: m(ns, rng), ys: (0..ns).map(|i| i % classes).collect(), xt: m(nt, rng) }
}

fn values(m: &Model) -> Vec<Vec<f64>> {
    m.store.iter().map(|p| p.value.data().to_vec()).collect()
}

// ── schedule and optimizer ─────────────────────────────────────────

#[test]
fn lambda_examples() {
    assert_eq!(lambda_schedule(0.0, 10.0), 0.0);
    let direct = |p: f64, g: f64| 2.0 / (1.0 + (-g * p).exp()) - 1.0;
    assert!((lambda_schedule(0.1, 10.0) - 0.5f64.tanh()).abs() < 1e-15);
    assert!((lambda_schedule(0.1, 10.0) - 0.46212).abs() < 1e-4);
    assert!((lambda_schedule(1.0, 10.0) - 0.99991).abs() < 1e-4);
    for i in 0..=100 {
        let p = i as f64 / 100.0;
        assert!((lambda_schedule(p, 10.0) - direct(p, 10.0)).abs() < 1e-14);
        if i > 0 {
            assert!(lambda_schedule(p, 10.0) > lambda_schedule(p - 0.01, 10.0));
        }
    }
}

#[test]
fn momentum_unrolls_by_hand() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.5));
    let mut opt = OptimizerState::new(&store);
    let (lr, m, g) = (0.1, 0.9, 2.0);
    store.get_mut(w).grad = Tensor::scalar(g);
    opt.apply(&mut store, &[w], lr, m, false);
    assert!((store.value(w).item() - (1.5 - lr * g)).abs() < 1e-15);
    opt.apply(&mut store, &[w], lr, m, false);
    assert!((store.value(w).item() - (1.5 - lr * g * (2.0 + m))).abs() < 1e-15);
    assert!((opt.buffer(w).item() - g * (1.0 + m)).abs() < 1e-15);
}

#[test]
fn ascent_flips_the_update() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(0.0));
    let mut opt = OptimizerState::new(&store);
    store.get_mut(w).grad = Tensor::scalar(1.0);
    opt.apply(&mut store, &[w], 0.5, 0.0, true);
    assert_eq!(store.value(w).item(), 0.5);
}

// ── train_step ─────────────────────────────────────────────────────

#[test]
fn zero_momentum_step_is_plain_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = random_batch(&mut rng, 8, 8, 2, 2);
    let cfg = TrainConfig { momentum: 0.0, total_steps: 10, lr: 0.05, ..tiny_cfg() };
    let mut model = Model::new(Architecture::mlp(2, 4), 2, 1).unwrap();
    let before = values(&model);
    let mut opt = OptimizerState::new(&model.store);
    train_step(&mut model, &mut opt, &batch, &cfg, 5).unwrap();
    let disc = model.discriminator_params();
    for p in model.store.iter() {
        let sign = if disc.contains(&p.id) { -1.0 } else { 1.0 };
        for ((new, old), g) in p.value.data().iter().zip(&before[p.id.0]).zip(p.grad.data()) {
            assert_eq!(*new, old - cfg.lr * sign * g, "{}", p.name);
        }
    }
}

/// Independent source-only SGD: embed only the source rows, cross-entropy,
/// momentum by hand.
fn supervised_reference(model: &mut Model, bufs: &mut [Vec<f64>], batch: &Batch, lr: f64, m: f64) {
    let mut tape = Tape::new();
    let x = tape.constant(batch.xs.clone());
    let f = model.embed(&mut tape, x, Mode::Train).unwrap().features;
    let logits = model.classify(&mut tape, f).unwrap();
    let loss = tape.cross_entropy(logits, &batch.ys).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut store = model.store.clone();
    store.zero_grad();
    grads.accumulate_into(&mut store);
    for id in model.generator_params().into_iter().chain(model.classifier_params()) {
        let g = store.grad(id).data().to_vec();
        let v = model.store.value_mut(id).data_mut();
        for ((b, v), g) in bufs[id.0].iter_mut().zip(v).zip(g) {
            *b = m * *b + g;
            *v -= lr * *b;
        }
    }
}

#[test]
fn without_adaptation_terms_a_step_is_supervised_sgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = TrainConfig { alpha: 0.0, adversarial: false, ..tiny_cfg() };
    let mut a = Model::new(Architecture::mlp(3, 4), 3, 2).unwrap();
    let mut b = a.clone();
    let mut opt = OptimizerState::new(&a.store);
    let mut bufs: Vec<Vec<f64>> = b.store.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for step in 0..3 {
        let batch = random_batch(&mut rng, 9, 7, 3, 3);
        let r = train_step(&mut a, &mut opt, &batch, &cfg, step).unwrap();
        assert_eq!((r.l_dann, r.l_cycle), (0.0, 0.0));
        supervised_reference(&mut b, &mut bufs, &batch, cfg.lr, cfg.momentum);
    }
    for (pa, pb) in a.store.iter().zip(b.store.iter()) {
        let d = pa.value.max_abs_diff(&pb.value);
        assert!(d < 1e-14, "{}: {d:e}", pa.name);
    }
}

#[test]
fn discriminator_and_generator_updates_are_partitioned() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = random_batch(&mut rng, 6, 5, 2, 2);
    let cfg = TrainConfig { alpha: 0.0, momentum: 0.0, lr: 0.1, ..tiny_cfg() };
    let m0 = Model::new(Architecture::mlp(2, 3), 2, 3).unwrap();
    let mut m1 = m0.clone();
    let mut opt = OptimizerState::new(&m1.store);
    train_step(&mut m1, &mut opt, &batch, &cfg, 0).unwrap();

    let x = {
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| batch.xs.row(i).to_vec()).collect();
        rows.extend((0..5).map(|i| batch.xt.row(i).to_vec()));
        Tensor::from_rows(&rows)
    };
    // Generator side: L_cls + L_dann with the discriminator held fixed.
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let f = m0.embed(&mut tape, xn, Mode::Train).unwrap().features;
    let logits = m0.classify(&mut tape, f).unwrap();
    let ls = tape.slice_rows(logits, 0, 6).unwrap();
    let cls = tape.cross_entropy(ls, &batch.ys).unwrap();
    let d = m0.discriminate(&mut tape, f).unwrap();
    let ds = tape.slice_rows(d, 0, 6).unwrap();
    let dt = tape.slice_rows(d, 6, 5).unwrap();
    let dann = model::dann_loss(&mut tape, ds, dt).unwrap();
    let total = tape.add(cls, dann).unwrap();
    let mut gen_grads = m0.store.clone();
    gen_grads.zero_grad();
    tape.backward(total).unwrap().accumulate_into(&mut gen_grads);

    // Discriminator side: ascent on detached features.
    let mut dtape = Tape::new();
    let fd = dtape.constant(tape.value(f).clone());
    let d = m0.discriminate(&mut dtape, fd).unwrap();
    let ds = dtape.slice_rows(d, 0, 6).unwrap();
    let dt = dtape.slice_rows(d, 6, 5).unwrap();
    let dann = model::dann_loss(&mut dtape, ds, dt).unwrap();
    let dgrads = dtape.backward(dann).unwrap();
    let mut disc_grads = m0.store.clone();
    disc_grads.zero_grad();
    dgrads.accumulate_into(&mut disc_grads);

    for id in m0.adaptation_params() {
        assert!(disc_grads.grad(id).data().iter().all(|&g| g == 0.0));
        let want = m0.store.value(id).data().iter().zip(gen_grads.grad(id).data()).map(|(v, g)| v - 0.1 * g);
        for (w, got) in want.zip(m1.store.value(id).data()) {
            assert!((w - got).abs() < 1e-14);
        }
    }
    for id in m0.discriminator_params() {
        let want = m0.store.value(id).data().iter().zip(disc_grads.grad(id).data()).map(|(v, g)| v + 0.1 * g);
        for (w, got) in want.zip(m1.store.value(id).data()) {
            assert!((w - got).abs() < 1e-14);
        }
    }
}

#[test]
fn degenerate_graph_skips_the_cycle_term() {
    let mut model = Model::new(Architecture::mlp(1, 2), 2, 0).unwrap();
    let batch = Batch {
        xs: Tensor::matrix(4, 1, vec![0.0, 0.1, 0.2, 0.3]),
        ys: vec![0, 1, 0, 1],
        xt: Tensor::matrix(4, 1, vec![1e4, 1e4 + 0.1, 1e4 + 0.2, 1e4 + 0.3]),
    };
    let cfg = TrainConfig { total_steps: 10, ..tiny_cfg() };
    let mut opt = OptimizerState::new(&model.store);
    let r = train_step(&mut model, &mut opt, &batch, &cfg, 4).unwrap();
    let w = r.warning.expect("warning");
    assert!(w.contains("singular") && w.contains("batch 4"), "{w}");
    assert_eq!(r.l_cycle, 0.0);
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut model = Model::new(Architecture::mlp(1, 2), 2, 0).unwrap();
    let batch = Batch { xs: Tensor::matrix(2, 1, vec![f64::NAN, 0.0]), ys: vec![0, 1], xt: Tensor::zeros(2, 1) };
    let cfg = TrainConfig { alpha: 0.0, ..tiny_cfg() };
    let mut opt = OptimizerState::new(&model.store);
    match train_step(&mut model, &mut opt, &batch, &cfg, 7) {
        Err(TrainError::NonFinite { step: 7, diagnostic }) => assert!(diagnostic.contains("l_cls")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn diverged_features_abort_before_the_cycle_term() {
    let mut model = Model::new(Architecture::mlp(1, 2), 2, 0).unwrap();
    let batch = Batch { xs: Tensor::matrix(2, 1, vec![f64::NAN, 0.0]), ys: vec![0, 1], xt: Tensor::zeros(2, 1) };
    let mut opt = OptimizerState::new(&model.store);
    match train_step(&mut model, &mut opt, &batch, &tiny_cfg(), 3) {
        Err(TrainError::NonFinite { step: 3, diagnostic }) => {
            assert!(diagnostic.contains("source features"), "{diagnostic}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncated_mode_reports_and_trains() {
    let sc = moons(4);
    let cfg = TrainConfig { propagation: PropagationMode::Truncated { steps: 20 }, total_steps: 5, ..tiny_cfg() };
    let r = fit(data(&sc), &cfg).unwrap();
    assert_eq!(r.history.len(), 5);
    assert!(r.history.iter().all(|h| h.total.is_finite() && h.l_cycle > 0.0));
}

// ── fit ────────────────────────────────────────────────────────────

#[test]
fn zero_steps_returns_initial_model() {
    let sc = moons(1);
    let cfg = TrainConfig { total_steps: 0, ..tiny_cfg() };
    let r = fit(data(&sc), &cfg).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(r.best_val_acc, None);
    let init = Model::new(Architecture::mlp(2, 4), 2, Seeds::from_seed(cfg.seed).model).unwrap();
    assert_eq!(values(&r.model), values(&init));
}

#[test]
fn fit_is_deterministic() {
    let sc = moons(2);
    let a = fit(data(&sc), &tiny_cfg()).unwrap();
    let b = fit(data(&sc), &tiny_cfg()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(values(&a.model), values(&b.model));
}

#[test]
fn selected_checkpoint_has_the_best_validation_accuracy() {
    let sc = moons(3);
    let cfg = TrainConfig { total_steps: 60, eval_every: 7, ..tiny_cfg() };
    let r = fit(data(&sc), &cfg).unwrap();
    let evals: Vec<f64> = r.history.iter().filter_map(|h| h.val_acc).collect();
    assert_eq!(evals.len(), 60 / 7 + 1);
    assert!(r.history.last().unwrap().val_acc.is_some());
    let max = evals.iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(r.best_val_acc, Some(max));
    assert_eq!(evaluate(&r.model, &sc.validation).unwrap(), max);
    assert_eq!(r.history[r.best_step.unwrap()].val_acc, Some(max));
}

#[test]
fn two_moons_loss_falls_over_200_steps() {
    let sc = moons(7);
    let cfg = TrainConfig { total_steps: 201, seed: 7, ..TrainConfig::default() };
    let cfg = TrainConfig { batch_source: 64, batch_target: 64, ..cfg };
    let r = fit(data(&sc), &cfg).unwrap();
    let (first, last) = (r.history[0].total, r.history[200].total);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn progress_and_lambda_follow_the_step() {
    let sc = moons(5);
    let r = fit(data(&sc), &tiny_cfg()).unwrap();
    for h in &r.history {
        assert_eq!(h.progress, h.step as f64 / 30.0);
        assert_eq!(h.lambda, lambda_schedule(h.progress, 10.0));
    }
}

#[test]
fn config_validation() {
    for cfg in [
        TrainConfig { lr: 0.0, ..tiny_cfg() },
        TrainConfig { momentum: 1.0, ..tiny_cfg() },
        TrainConfig { alpha: -1.0, ..tiny_cfg() },
        TrainConfig { batch_source: 1, ..tiny_cfg() },
        TrainConfig { eval_every: 0, ..tiny_cfg() },
        TrainConfig { propagation: PropagationMode::Truncated { steps: 0 }, ..tiny_cfg() },
        TrainConfig { generator: GeneratorKind::Conv2, ..tiny_cfg() },
    ] {
        let sc = moons(0);
        assert!(fit(data(&sc), &cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn variants_toggle_terms() {
    let base = TrainConfig { alpha: 2.0, adversarial: false, ..tiny_cfg() };
    let so = Variant::SourceOnly.apply(&base);
    assert_eq!((so.alpha, so.adversarial), (0.0, false));
    let adv = Variant::Adversarial.apply(&base);
    assert_eq!((adv.alpha, adv.adversarial), (0.0, true));
    let full = Variant::Full.apply(&base);
    assert_eq!((full.alpha, full.adversarial), (2.0, true));
}

// ── evaluate ───────────────────────────────────────────────────────

#[test]
fn accuracy_examples() {
    let logits = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0], vec![0.5, 0.5]]);
    assert_eq!(accuracy(&logits, &[0, 1, 0, 0]), 1.0);
    assert_eq!(accuracy(&logits, &[0, 1, 1, 1]), 0.5);
    assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
}

#[test]
fn accuracy_matches_brute_force_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, c) = (rng.random_range(1..40), rng.random_range(2..6));
        // Integer logits make ties common.
        let logits = Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(0..3) as f64).collect());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut hits = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let top = row.iter().copied().fold(f64::MIN, f64::max);
            let first = row.iter().position(|&v| v == top).unwrap();
            hits += usize::from(first == label);
        }
        assert_eq!(accuracy(&logits, &labels), hits as f64 / n as f64);
    }
}

#[test]
fn evaluate_uses_the_validation_labels() {
    let sc = moons(6);
    let model = Model::new(Architecture::mlp(2, 4), 2, 0).unwrap();
    let acc = evaluate(&model, &sc.validation).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(sc.validation.domain, Domain::Target);
    assert_eq!(sc.validation.split, Split::Validation);
}
