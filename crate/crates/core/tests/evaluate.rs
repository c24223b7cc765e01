use deltashare::calibration::{generate_synth, Dataset, SynthTaskSpec};
use deltashare::evaluate::{evaluate, Report};
use deltashare::planner::{ReusePlan, Strategy, SubTaskPlan};
use deltashare::reuse::{run_frame, FrameCaches, Runtime};
use deltashare::store::{random_bundle, ModelBundle};
use deltashare::tensor::OpCounter;
use deltashare::transformer::BackboneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(th: f64) -> (ModelBundle, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut config = BackboneConfig::new(3, 8, 2, 6, 5);
    config.thresholds = vec![th; 3];
    let mut bundle = random_bundle(&config, 2, 2, 0.1, &mut rng);
    for s in &mut bundle.sub_tasks {
        s.thresholds = vec![th; 3];
    }
    let data = generate_synth(&SynthTaskSpec {
        tasks: 3,
        frames: 7,
        clips: 3,
        tokens: 6,
        patch_dim: 5,
        ..Default::default()
    })
    .unwrap();
    (bundle, data)
}

fn combined(period: usize) -> ReusePlan {
    let subs = vec![
        SubTaskPlan { task: "task1".into(), boundary: 1 },
        SubTaskPlan { task: "task2".into(), boundary: 3 },
    ];
    ReusePlan::new(Strategy::Combined, period, 3, subs).unwrap()
}

#[test]
fn period_one_has_only_offset_zero() {
    let (bundle, data) = setup(0.01);
    let rt = Runtime::new(&bundle).unwrap();
    let r = evaluate(&rt, &combined(1), &data, serde_json::Value::Null).unwrap();
    assert_eq!(r.offsets.iter().map(|o| o.offset).collect::<Vec<_>>(), vec![0]);
    let r = evaluate(&rt, &combined(3), &data, serde_json::Value::Null).unwrap();
    assert_eq!(r.offsets.iter().map(|o| o.offset).collect::<Vec<_>>(), vec![0, 1, 2]);
    // 7 frames per clip: offsets 0 and 1 occur three times, offset 2 twice
    assert_eq!(r.offsets.iter().map(|o| o.task_frames).collect::<Vec<_>>(), vec![27, 18, 18]);
}

#[test]
fn zero_threshold_report_matches_dense() {
    let (bundle, data) = setup(0.0);
    let rt = Runtime::new(&bundle).unwrap();
    for plan in [combined(1), combined(4), ReusePlan::new(Strategy::Dense, 1, 3, combined(1).sub_tasks).unwrap()] {
        let r = evaluate(&rt, &plan, &data, serde_json::Value::Null).unwrap();
        for t in &r.tasks {
            assert!(t.max_dense_deviation < 1e-8, "{}: {}", t.task, t.max_dense_deviation);
        }
    }
}

#[test]
fn report_totals_recount_from_frames() {
    let (bundle, data) = setup(0.05);
    let rt = Runtime::new(&bundle).unwrap();
    let plan = combined(3);
    let r = evaluate(&rt, &plan, &data, serde_json::json!({ "seed": 0 })).unwrap();

    let mut per_task = [OpCounter::new(); 3];
    let mut attention = [OpCounter::new(); 3];
    let mut embedding = OpCounter::new();
    for clip in &data.clips {
        let mut caches = FrameCaches::new(3);
        for (i, f) in clip.frames.iter().enumerate() {
            let fr = run_frame(&rt, &plan.frame_plan(i as u64), f, &mut caches).unwrap();
            embedding += fr.embedding;
            for (t, tr) in fr.tasks.iter().enumerate() {
                per_task[t] += tr.total;
                attention[t] += tr.attention;
            }
        }
    }
    assert_eq!(r.embedding, embedding);
    for (t, tr) in r.tasks.iter().enumerate() {
        assert_eq!(tr.total, per_task[t]);
        assert_eq!(tr.attention, attention[t]);
        assert_eq!(tr.frames, 21);
        assert_eq!(tr.dense_multiplies, 21 * 3 * bundle.config.dense_block_macs());
        assert_eq!(tr.multiplies_vs_dense.numerator, tr.total.multiplies);
    }
    let sum: u64 = per_task.iter().map(|c| c.multiplies).sum();
    assert_eq!(r.total_multiplies, sum);
    assert_eq!(r.offsets.iter().map(|o| o.multiplies).sum::<u64>(), sum);
    let pct = 100.0 * sum as f64 / r.total_dense_multiplies as f64;
    assert_eq!(r.multiplies_vs_dense.percent, pct);
    assert_eq!(r.run, serde_json::json!({ "seed": 0 }));
}

#[test]
fn storage_compares_with_separate_models() {
    let (bundle, data) = setup(0.0);
    let rt = Runtime::new(&bundle).unwrap();
    let r = evaluate(&rt, &combined(2), &data, serde_json::Value::Null).unwrap();
    let s = &r.storage;
    let block = 3 * 10 * 64u64;
    let head = 8 * 2 + 2u64;
    assert_eq!(s.params_vs_separate.denominator, 3 * (block + head));
    assert_eq!(s.params_vs_separate.numerator, s.params.iter().map(|a| a.value).sum::<u64>());
    assert!(s.params_vs_separate.percent < 100.0);
    assert_eq!(s.memory_vs_separate.denominator, 4 * 3 * (block + head));
}

#[test]
fn report_json_round_trips_and_rejects_empty() {
    let (bundle, data) = setup(0.02);
    let rt = Runtime::new(&bundle).unwrap();
    let r = evaluate(&rt, &combined(2), &data, serde_json::Value::Null).unwrap();
    let text = r.to_json().unwrap();
    assert_eq!(Report::from_json(&text).unwrap(), r);
    let mut empty = r.clone();
    empty.tasks.clear();
    assert!(Report::from_json(&empty.to_json().unwrap()).is_err());
    assert!(Report::from_json("").is_err());
}

#[test]
fn mismatched_plan_is_rejected() {
    let (bundle, data) = setup(0.0);
    let rt = Runtime::new(&bundle).unwrap();
    let short = ReusePlan::combined(&[1], 2, 3).unwrap();
    assert!(evaluate(&rt, &short, &data, serde_json::Value::Null).is_err());
}
