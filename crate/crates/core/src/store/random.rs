use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{DeltaModel, ModelBundle, TaskId};
use crate::tensor::{CsrMatrix, DenseMatrix};
use crate::transformer::{BackboneConfig, BlockWeights, TaskHead};

fn random_csr<R: Rng + ?Sized>(dim: usize, density: f64, scale: f64, rng: &mut R) -> CsrMatrix {
    let mut trips = Vec::new();
    for r in 0..dim {
        for c in 0..dim {
            if rng.gen::<f64>() < density {
                let v: f64 = StandardNormal.sample(rng);
                trips.push((r, c, v * scale));
            }
        }
    }
    CsrMatrix::from_triplets(dim, dim, trips).expect("in-range triplets")
}

fn random_head<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> TaskHead {
    let n = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
    TaskHead {
        weight: DenseMatrix::from_fn(dim, classes, |_, _| n.sample(rng)),
        bias: (0..classes).map(|_| n.sample(rng)).collect(),
    }
}

/// A bundle with Gaussian base weights and independent random sparse deltas
/// of the given density for `sub_tasks` tasks. Values are rounded to `f32`.
pub fn random_bundle<R: Rng + ?Sized>(
    config: &BackboneConfig,
    sub_tasks: usize,
    classes: usize,
    delta_density: f64,
    rng: &mut R,
) -> ModelBundle {
    let d = config.dim;
    let embedding = {
        let n = Normal::new(0.0, 1.0 / (config.patch_dim as f64).sqrt()).unwrap();
        DenseMatrix::from_fn(config.patch_dim, d, |_, _| n.sample(rng))
    };
    let base_weights = (0..config.layers)
        .map(|_| BlockWeights::random(d, config.heads, 1.0, rng))
        .collect();
    let base_head = random_head(d, classes, rng);
    let delta_scale = 0.1 / (d as f64).sqrt();
    let sub_tasks = (0..sub_tasks)
        .map(|i| DeltaModel {
            task: TaskId::new(format!("task{}", i + 1), i + 1),
            deltas: (0..config.layers)
                .map(|_| {
                    (0..config.sites_per_block())
                        .map(|_| random_csr(d, delta_density, delta_scale, rng))
                        .collect()
                })
                .collect(),
            thresholds: config.thresholds.clone(),
            head: random_head(d, classes, rng),
        })
        .collect();
    let mut b = ModelBundle {
        config: config.clone(),
        embedding,
        base_task: TaskId::new("base", 0),
        base_weights,
        base_head,
        sub_tasks,
    };
    b.round_to_f32();
    b
}
