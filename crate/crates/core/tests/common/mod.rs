//! Independent reference implementations used as test oracles. Nothing here
//! calls the library's kernels or forward pass.

#![allow(dead_code)]

use deltashare::store::ModelBundle;
use deltashare::tensor::{CsrMatrix, DenseMatrix};
use deltashare::transformer::Site;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn csr_to_mat(m: &CsrMatrix) -> Mat {
    let mut out = vec![vec![0.0; m.cols()]; m.rows()];
    for (r, c, v) in m.iter() {
        out[r][c] = v;
    }
    out
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|c| a.iter().map(|r| r[c]).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &DenseMatrix) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in a.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            worst = worst.max((x - b.get(r, c)).abs());
        }
    }
    worst
}

/// Largest elementwise gap relative to the largest reference magnitude.
pub fn rel_diff(reference: &Mat, got: &DenseMatrix) -> f64 {
    let scale = reference.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    max_abs_diff(reference, got) / scale
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random matrix where each entry is nonzero with probability `density`.
pub fn random_sparse(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < density {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { v } else { -v }
        } else {
            0.0
        }
    })
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn softmax_rows(m: &mut Mat) {
    for row in m {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - top).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
}

fn positions(tokens: usize, dim: usize) -> Mat {
    (0..tokens)
        .map(|p| {
            (0..dim)
                .map(|c| {
                    let angle = p as f64 / 10000f64.powf(2.0 * (c / 2) as f64 / dim as f64);
                    if c % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

/// Weight of `site` for `task`, densified as `W + dW`.
pub fn task_weight(bundle: &ModelBundle, task: usize, layer: usize, site: Site) -> Mat {
    let base = to_mat(bundle.base_weights[layer].site(site));
    if task == 0 {
        return base;
    }
    let delta = bundle.sub_tasks[task - 1].delta(layer, site, bundle.config.heads);
    add(&base, &csr_to_mat(delta))
}

/// Dense forward of one task written from the block definition: per-head
/// `softmax(Q K^T / sqrt(D)) V`, summed head outputs through `W_O`, residual,
/// `GELU(X W1) W2`, residual, no normalization, then the affine head.
pub fn reference_forward(bundle: &ModelBundle, task: usize, patches: &DenseMatrix) -> Mat {
    let cfg = &bundle.config;
    assert!(!cfg.post_norm, "reference forward has no normalization");
    let mut x = add(&matmul(&to_mat(patches), &to_mat(&bundle.embedding)), &positions(cfg.tokens, cfg.dim));
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    for l in 0..cfg.layers {
        let w = |s: Site| task_weight(bundle, task, l, s);
        let mut x1 = x.clone();
        for i in 0..cfg.heads {
            let q = matmul(&x, &w(Site::Query(i)));
            let k = matmul(&x, &w(Site::Key(i)));
            let v = matmul(&x, &w(Site::Value(i)));
            let mut scores = matmul(&q, &transpose(&k));
            for row in scores.iter_mut() {
                for s in row.iter_mut() {
                    *s *= scale;
                }
            }
            softmax_rows(&mut scores);
            let head = matmul(&scores, &v);
            x1 = add(&x1, &matmul(&head, &w(Site::Output(i))));
        }
        let hidden: Mat = matmul(&x1, &w(Site::Ffn1))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        x = add(&x1, &matmul(&hidden, &w(Site::Ffn2)));
    }
    let head = if task == 0 { &bundle.base_head } else { &bundle.sub_tasks[task - 1].head };
    matmul(&x, &to_mat(&head.weight))
        .into_iter()
        .map(|r| r.into_iter().zip(&head.bias).map(|(v, b)| v + b).collect())
        .collect()
}
