use deltashare::planner::{
    build_schedule, greedy_modes, relative_costs, report_costs, select_boundary, select_boundary_from_costs,
    split_cost, ReusePlan,
};
use deltashare::reuse::{DensityStats, ReuseMode};
use deltashare::transformer::BackboneConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stats(rng: &mut ChaCha8Rng, layers: usize) -> DensityStats {
    let mut s = DensityStats::uniform("t", layers, 0.0, 0.0, 0.0);
    for l in 0..layers {
        s.s_w[l] = rng.gen_range(0.0..0.6);
        s.s_a1[l] = rng.gen_range(0.0..1.0);
        s.s_a2[l] = rng.gen_range(0.0..1.0);
    }
    s
}

/// Prefix-split cost summed directly from the densities.
fn brute_cost(s: &DensityStats, b: usize) -> f64 {
    (0..s.layers())
        .map(|l| if l < b { s.s_w[l] + s.s_a1[l] } else { s.s_a2[l] })
        .sum()
}

#[test]
fn boundary_never_beaten_by_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..1000 {
        let layers = rng.gen_range(1..=12);
        let s = random_stats(&mut rng, layers);
        let b = select_boundary(&s).unwrap();
        let chosen = brute_cost(&s, b);
        for other in 0..=layers {
            assert!(brute_cost(&s, other) >= chosen, "{s:?}: {other} beats {b}");
        }
        // the tie rule: no smaller split is as cheap
        for other in 0..b {
            assert!(brute_cost(&s, other) > chosen);
        }
    }
}

#[test]
fn greedy_per_layer_cost_bounds_prefix_split_from_below() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..500 {
        let layers = rng.gen_range(1..=12);
        let s = random_stats(&mut rng, layers);
        let greedy: f64 = greedy_modes(&s)
            .iter()
            .enumerate()
            .map(|(l, m)| match m {
                ReuseMode::Task => s.s_w[l] + s.s_a1[l],
                _ => s.s_a2[l],
            })
            .sum();
        let (task, temporal) = relative_costs(&s);
        let best = split_cost(&task, &temporal, select_boundary(&s).unwrap());
        assert!(greedy <= best + 1e-12);
    }
}

#[test]
fn lowering_task_density_inside_boundary_keeps_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..500 {
        let layers = rng.gen_range(1..=12);
        let mut s = random_stats(&mut rng, layers);
        let b = select_boundary(&s).unwrap();
        if b == 0 {
            continue;
        }
        let l = rng.gen_range(0..b);
        s.s_a1[l] *= rng.gen_range(0.0..1.0);
        assert!(select_boundary(&s).unwrap() > l);
    }
}

proptest! {
    #[test]
    fn uniformly_cheaper_domain_decides(layers in 1usize..12, task in 0.0f64..0.5, gap in 0.01f64..0.5) {
        let t = vec![task; layers];
        let dearer = vec![task + gap; layers];
        prop_assert_eq!(select_boundary_from_costs(&t, &dearer).unwrap(), layers);
        prop_assert_eq!(select_boundary_from_costs(&dearer, &t).unwrap(), 0);
    }
}

#[test]
fn schedule_summation_matches_cost_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let config = BackboneConfig::new(4, 8, 2, 5, 3);
    let stats: Vec<DensityStats> = (0..3).map(|_| random_stats(&mut rng, 4)).collect();
    for period in [1, 3, 5] {
        let plan = ReusePlan::combined(&[1, 3], period, 4).unwrap();
        let est = report_costs(&plan, &stats, &config).unwrap();
        let frames = build_schedule(&plan, period as u64).unwrap();
        let unit = config.projection_macs() as f64 * config.sites_per_block() as f64;
        let attention = (config.attention_macs() * 4) as f64;
        for (t, s) in stats.iter().enumerate() {
            let mut total = 0.0;
            for f in &frames {
                let modes = if t == 0 { &f.base_modes } else { &f.sub_modes[t - 1] };
                for (l, m) in modes.iter().enumerate() {
                    let density = match m {
                        ReuseMode::Dense => 1.0,
                        ReuseMode::Task => s.s_w[l] + s.s_a1[l],
                        ReuseMode::Temporal => s.s_a2[l],
                    };
                    total += density * unit;
                }
                total += attention;
            }
            let per_frame = total / period as f64;
            let got = est.tasks[t].per_frame;
            assert!((got - per_frame).abs() < 1e-9 * per_frame, "period {period} task {t}");
            let dense = (config.dense_block_macs() * 4) as f64;
            assert_eq!(est.tasks[t].dense_baseline, dense);
        }
        let sum: f64 = est.tasks.iter().map(|t| t.per_frame).sum();
        assert!((est.per_frame - sum).abs() < 1e-9 * sum);
    }
}

#[test]
fn zero_density_leaves_only_attention() {
    let config = BackboneConfig::new(3, 8, 2, 5, 3);
    let stats = vec![DensityStats::uniform("a", 3, 0.0, 0.0, 0.0), DensityStats::uniform("b", 3, 0.0, 0.0, 0.0)];
    let plan = ReusePlan::combined(&[3], 1_000_000, 3).unwrap();
    let est = report_costs(&plan, &stats, &config).unwrap();
    for t in &est.tasks {
        assert_eq!(t.non_keyframe_projection, 0.0);
        assert_eq!(t.attention, (config.attention_macs() * 3) as f64);
    }
    let full = vec![DensityStats::uniform("a", 3, 0.0, 1.0, 1.0), DensityStats::uniform("b", 3, 0.0, 1.0, 1.0)];
    let est = report_costs(&ReusePlan::combined(&[0], 2, 3).unwrap(), &full, &config).unwrap();
    assert!((est.percent_of_dense - 100.0).abs() < 1e-9);
}
