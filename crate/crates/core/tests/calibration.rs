use deltashare::calibration::{
    binarize_and_fix, calibrate, calibrate_sub_task, generate_synth, init_base, masked_objective,
    stage1_train_l0, stage2_finetune, stage3_activation_sparsify, train_base, ActivationTerms, BaseModel, CalibConfig,
    Dataset, HardConcreteGate, MaskedDeltas, SynthTaskSpec, TrainState,
};
use deltashare::planner::{ReusePlan, Strategy, SubTaskPlan};
use deltashare::reuse::{measure_densities, run_frame, FrameCaches, Runtime};
use deltashare::store::{encode_bundle, DeltaModel, TaskId};
use deltashare::tensor::DenseMatrix;
use deltashare::transformer::BackboneConfig;
use deltashare::Error;

fn data(frames: usize) -> Dataset {
    generate_synth(&SynthTaskSpec {
        seed: 3,
        tasks: 2,
        frames,
        clips: 4,
        tokens: 6,
        patch_dim: 5,
        ..Default::default()
    })
    .unwrap()
}

fn quick() -> CalibConfig {
    CalibConfig {
        base_steps: 60,
        stage1_steps: 60,
        stage2_steps: 60,
        stage3_steps: 10,
        threshold_points: 5,
        ..Default::default()
    }
}

fn trained_base(d: &Dataset, cfg: &CalibConfig) -> BaseModel {
    let mut config = BackboneConfig::new(cfg.layers, cfg.dim, cfg.heads, d.spec.tokens, d.spec.patch_dim);
    config.post_norm = cfg.post_norm;
    train_base(&init_base(&config, d.spec.classes, cfg), d, cfg).unwrap().0
}

fn window_mean(h: &[f64], from: usize, to: usize) -> f64 {
    h[from..to].iter().sum::<f64>() / (to - from) as f64
}

#[test]
fn no_penalty_leaves_gates_near_init_while_loss_falls() {
    let d = data(5);
    let cfg = CalibConfig { lambda_w: 0.0, ..quick() };
    let base = trained_base(&d, &cfg);
    let state = TrainState::new(TaskId::new("task1", 1), &base, &cfg);
    let before = state.mean_expected_l0(&cfg.gate);
    let after = stage1_train_l0(&state, &base, &d, &cfg).unwrap();
    let drift = (after.mean_expected_l0(&cfg.gate) - before).abs();
    assert!(drift < 0.05, "expected L0 moved by {drift}");
    let h = &after.loss_history;
    assert!(window_mean(h, h.len() - 10, h.len()) < window_mean(h, 0, 10));
}

fn state_with(la: impl Fn(usize, usize) -> f64, base: &BaseModel, cfg: &CalibConfig) -> TrainState {
    let mut s = TrainState::new(TaskId::new("task1", 1), base, cfg);
    for (i, (d, a)) in s.params.deltas.iter_mut().flatten().zip(s.params.log_alpha.iter_mut().flatten()).enumerate() {
        *d = DenseMatrix::from_fn(d.rows(), d.cols(), |r, c| 0.1 + (i * 31 + r * 7 + c) as f64 * 1e-3);
        *a = DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| la(i, r * 97 + c));
    }
    s
}

#[test]
fn binarize_open_closed_and_mixed() {
    let cfg = quick();
    let base = init_base(&BackboneConfig::new(2, 8, 2, 6, 5), 2, &cfg);
    let gate = HardConcreteGate::default();
    let total: usize = 2 * 10 * 64;

    let open = binarize_and_fix(&state_with(|_, _| 50.0, &base, &cfg), &gate, 0.5).unwrap();
    assert_eq!(open.nnz(), total);
    let s = state_with(|_, _| 50.0, &base, &cfg);
    for (m, dense) in open.deltas.iter().flatten().zip(s.params.deltas.iter().flatten()) {
        assert_eq!(&m.to_dense(), dense);
    }
    let closed = binarize_and_fix(&state_with(|_, _| -50.0, &base, &cfg), &gate, 0.5).unwrap();
    assert_eq!(closed.nnz(), 0);

    // expected L0 >= 1/2 exactly when log_alpha >= beta ln(-gamma / zeta)
    let cut = gate.beta * (-gate.gamma / gate.zeta).ln();
    let mixed_la = |i: usize, j: usize| cut + ((i * 13 + j * 5) % 11) as f64 * 0.3 - 1.5;
    let s = state_with(mixed_la, &base, &cfg);
    let expected = s.params.log_alpha.iter().flatten().flat_map(|m| m.as_slice().to_vec()).filter(|&la| la >= cut).count();
    let mixed = binarize_and_fix(&s, &gate, 0.5).unwrap();
    assert_eq!(mixed.nnz(), expected);
    assert!(expected > 0 && expected < total);
}

fn masked_loss(model: &DeltaModel, base: &BaseModel, d: &Dataset) -> f64 {
    let p = MaskedDeltas { deltas: model.deltas.clone(), head: model.head.clone() };
    masked_objective(base, &p, &ActivationTerms::NONE, &d.clips, 1, &[]).unwrap().0
}

#[test]
fn stage2_zero_steps_is_identity_and_training_lowers_loss() {
    let d = data(5);
    let cfg = quick();
    let base = trained_base(&d, &cfg);
    let s1 = stage1_train_l0(&TrainState::new(TaskId::new("task1", 1), &base, &cfg), &base, &d, &cfg).unwrap();
    let model = binarize_and_fix(&s1, &cfg.gate, cfg.threshold_prob).unwrap();

    let (same, h) = stage2_finetune(&model, &base, &d, &CalibConfig { stage2_steps: 0, ..cfg.clone() }).unwrap();
    assert!(h.is_empty());
    assert_eq!(same, model);

    let (tuned, h) = stage2_finetune(&model, &base, &d, &CalibConfig { stage2_steps: 80, ..cfg }).unwrap();
    assert_eq!(h.len(), 80);
    assert!(masked_loss(&tuned, &base, &d) <= masked_loss(&model, &base, &d));
    // the pattern never grows
    for (a, b) in tuned.deltas.iter().flatten().zip(model.deltas.iter().flatten()) {
        assert!(a.iter().all(|(r, c, _)| b.iter().any(|(r2, c2, _)| (r, c) == (r2, c2))));
    }
}

#[test]
fn stage3_needs_five_frames_for_temporal_terms() {
    let d = data(4);
    let cfg = CalibConfig { lambda_a2: 1e-3, ..quick() };
    let base = trained_base(&d, &cfg);
    let model = DeltaModel::empty(TaskId::new("task1", 1), &BackboneConfig::new(2, 8, 2, 6, 5), base.head.clone());
    assert!(matches!(stage3_activation_sparsify(&model, &base, &d, &cfg), Err(Error::Config(_))));
    let ok = CalibConfig { lambda_a2: 0.0, lambda_a1: 1e-3, ..quick() };
    assert!(stage3_activation_sparsify(&model, &base, &d, &ok).is_ok());
}

#[test]
fn sub_task_calibration_leaves_base_bitwise_unchanged() {
    let d = data(5);
    let cfg = CalibConfig { lambda_w: 1e-5, lambda_a1: 1e-3, lambda_a2: 1e-3, ..quick() };
    let base = trained_base(&d, &cfg);
    let before = base.clone();
    calibrate_sub_task(TaskId::new("task1", 1), &base, &d, &cfg).unwrap();
    assert_eq!(base, before);

    let a = calibrate(&d, &CalibConfig { lambda_w: 0.0, ..cfg.clone() }).unwrap();
    let b = calibrate(&d, &cfg).unwrap();
    assert_eq!(a.bundle.base_weights, b.bundle.base_weights);
    assert_eq!(a.bundle.embedding, b.bundle.embedding);
}

#[test]
fn calibration_is_deterministic_and_densities_recount() {
    let d = data(5);
    let cfg = CalibConfig { lambda_w: 1e-5, lambda_a1: 1e-3, ..quick() };
    let a = calibrate(&d, &cfg).unwrap();
    let b = calibrate(&d, &cfg).unwrap();
    assert_eq!(encode_bundle(&a.bundle).unwrap(), encode_bundle(&b.bundle).unwrap());
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    let rt = Runtime::new(&a.bundle).unwrap();
    let recount = measure_densities(&rt, &d.clips[0].frames).unwrap();
    assert_eq!(a.report.densities.as_ref().unwrap(), &recount);
}

#[test]
fn zero_penalties_and_thresholds_give_dense_behaviour() {
    let d = data(5);
    let out = calibrate(&d, &quick()).unwrap();
    let mut bundle = out.bundle;
    bundle.config.thresholds = vec![0.0; 2];
    for s in &mut bundle.sub_tasks {
        s.thresholds = vec![0.0; 2];
    }
    let rt = Runtime::new(&bundle).unwrap();
    let subs = vec![SubTaskPlan { task: "task1".into(), boundary: 1 }];
    let plan = ReusePlan::new(Strategy::Combined, 2, 2, subs).unwrap();
    let mut caches = FrameCaches::new(2);
    for (i, f) in d.clips[0].frames.iter().enumerate() {
        let r = run_frame(&rt, &plan.frame_plan(i as u64), f, &mut caches).unwrap();
        for (t, tr) in r.tasks.iter().enumerate() {
            let (dense, _) = rt.dense_forward(t, f).unwrap();
            assert!(tr.predictions.max_abs_diff(&dense) < 1e-8);
        }
    }
}

#[test]
fn exploding_step_size_reports_divergence() {
    let d = data(5);
    let cfg = CalibConfig { learning_rate: 1e6, base_steps: 50, ..quick() };
    match calibrate(&d, &cfg) {
        Err(Error::Divergence { stage, .. }) => assert_eq!(stage, "base"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn frame_perturbation_matches_its_magnitude() {
    for p in [0.05, 0.1, 0.4] {
        let d = generate_synth(&SynthTaskSpec {
            perturbation: p,
            motion_fraction: 0.5,
            frames: 8,
            clips: 20,
            ..Default::default()
        })
        .unwrap();
        let (mut sq, mut n) = (0.0, 0usize);
        for c in &d.clips {
            for w in c.frames.windows(2) {
                for (a, b) in w[0].as_slice().iter().zip(w[1].as_slice()) {
                    if a != b {
                        sq += (b - a) * (b - a);
                        n += 1;
                    }
                }
            }
        }
        let rms = (sq / n as f64).sqrt();
        assert!((rms - p).abs() <= 0.2 * p, "perturbation {p}: rms {rms}");
    }
}
