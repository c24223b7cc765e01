use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deltashare::planner::ReusePlan;
use deltashare::reuse::{run_frame, FrameCaches, Runtime};
use deltashare::store::random_bundle;
use deltashare::tensor::{kernels, CsrMatrix, DenseMatrix, OpCounter};
use deltashare::transformer::BackboneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < density { rng.gen_range(-1.0..1.0) } else { 0.0 })
}

fn kernels_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("kernels");
    for &(p, d) in &[(64, 64), (196, 256)] {
        let x = random(p, d, 1.0, &mut rng);
        let w = random(d, d, 1.0, &mut rng);
        let sx = CsrMatrix::from_dense(&random(p, d, 0.1, &mut rng));
        let sw = CsrMatrix::from_dense(&random(d, d, 0.05, &mut rng));
        let id = format!("{p}x{d}");
        g.bench_with_input(BenchmarkId::new("dense_matmul/parallel", &id), &(), |b, _| {
            b.iter(|| kernels::dense_matmul(black_box(&x), &w, &mut OpCounter::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense_matmul/sequential", &id), &(), |b, _| {
            b.iter(|| kernels::sequential::dense_matmul(black_box(&x), &w, &mut OpCounter::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spmm/parallel", &id), &(), |b, _| {
            b.iter(|| kernels::spmm(black_box(&sx), &w, &mut OpCounter::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spmm/sequential", &id), &(), |b, _| {
            b.iter(|| kernels::sequential::spmm(black_box(&sx), &w, &mut OpCounter::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense_times_csr/parallel", &id), &(), |b, _| {
            b.iter(|| kernels::dense_times_csr(black_box(&x), &sw, &mut OpCounter::new()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense_times_csr/sequential", &id), &(), |b, _| {
            b.iter(|| kernels::sequential::dense_times_csr(black_box(&x), &sw, &mut OpCounter::new()).unwrap())
        });
    }
    g.finish();
}

/// A clip of 10 frames from a mid-sized backbone with three sub-tasks,
/// under a one-thread pool and the default pool.
fn frames_bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut config = BackboneConfig::new(4, 64, 4, 49, 48);
    config.thresholds = vec![0.02; 4];
    let bundle = random_bundle(&config, 3, 8, 0.05, &mut rng);
    let rt = Runtime::new(&bundle).unwrap();
    let plan = ReusePlan::combined(&[2, 2, 2], 5, 4).unwrap();
    let mut frame = random(49, 48, 1.0, &mut rng);
    let frames: Vec<DenseMatrix> = (0..10)
        .map(|_| {
            for r in 0..49 {
                if rng.gen::<f64>() < 0.2 {
                    frame.row_mut(r).iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
                }
            }
            frame.clone()
        })
        .collect();
    let clip = || {
        let mut caches = FrameCaches::new(4);
        for (i, f) in frames.iter().enumerate() {
            black_box(run_frame(&rt, &plan.frame_plan(i as u64), f, &mut caches).unwrap());
        }
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut g = c.benchmark_group("run_frame_clip");
    g.sample_size(20);
    g.bench_function("one_thread", |b| b.iter(|| one.install(clip)));
    g.bench_function("default_pool", |b| b.iter(clip));
    g.finish();
}

criterion_group!(benches, kernels_bench, frames_bench);
criterion_main!(benches);
