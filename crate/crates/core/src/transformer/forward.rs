use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BlockWeights, Site, TaskHead};
use crate::error::{Error, Result};
use crate::tensor::{dense_matmul, DenseMatrix, OpCounter};

const NORM_EPS: f64 = 1e-5;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Numerically stable row-wise softmax, in place.
pub fn softmax_rows(m: &mut DenseMatrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn normalize_rows(m: &mut DenseMatrix) {
    let n = m.cols() as f64;
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
}

/// Fixed sinusoidal position table, `tokens x dim`.
pub fn positional_table(tokens: usize, dim: usize) -> DenseMatrix {
    DenseMatrix::from_fn(tokens, dim, |p, c| {
        let pair = (c / 2) as f64;
        let angle = p as f64 / libm::pow(10000.0, 2.0 * pair / dim as f64);
        if c % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

/// Patchifier: `patches x W_embed + positions`. Shared by all tasks.
pub fn embed(
    patches: &DenseMatrix,
    embedding: &DenseMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    let mut tokens = dense_matmul(patches, embedding, counter)?;
    tokens.add_assign(&positional_table(patches.rows(), embedding.cols()))?;
    Ok(tokens)
}

/// `softmax(Q K^T / sqrt(D)) V`.
pub fn attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    if q.shape() != k.shape() || k.rows() != v.rows() {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    let mut scores = dense_matmul(q, &k.transpose(), counter)?;
    scores.scale(1.0 / (q.cols() as f64).sqrt());
    softmax_rows(&mut scores);
    dense_matmul(&scores, v, counter)
}

/// `GELU(X W_F1) W_F2`.
pub fn ffn(
    x: &DenseMatrix,
    w_f1: &DenseMatrix,
    w_f2: &DenseMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    let hidden = dense_matmul(x, w_f1, counter)?.map(gelu);
    dense_matmul(&hidden, w_f2, counter)
}

/// Routes each linear projection of a block.
pub trait ProjectionExecutor {
    fn project(
        &mut self,
        layer: usize,
        site: Site,
        input: &DenseMatrix,
        weight: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<DenseMatrix>;
}

/// Plain dense products.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseExecutor;

impl ProjectionExecutor for DenseExecutor {
    fn project(
        &mut self,
        _layer: usize,
        _site: Site,
        input: &DenseMatrix,
        weight: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<DenseMatrix> {
        dense_matmul(input, weight, counter)
    }
}

/// Input and output of one projection site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteActivation {
    pub input: DenseMatrix,
    pub output: DenseMatrix,
}

/// Per layer, the `4h + 2` projection activations in canonical site order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<SiteActivation>>,
}

impl ActivationTrace {
    pub fn site(&self, layer: usize, site_index: usize) -> Option<&SiteActivation> {
        self.layers.get(layer)?.get(site_index)
    }

    pub fn site_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

/// Multi-head attention then FFN, each with a residual connection.
pub fn block_forward(
    x: &DenseMatrix,
    weights: &BlockWeights,
    layer: usize,
    post_norm: bool,
    executor: &mut dyn ProjectionExecutor,
    counter: &mut OpCounter,
    trace: Option<&mut Vec<SiteActivation>>,
) -> Result<DenseMatrix> {
    let heads = weights.heads();
    if x.cols() != weights.dim() {
        return Err(Error::shape("block input", x.shape(), (x.rows(), weights.dim())));
    }
    let mut slots: Vec<Option<SiteActivation>> = vec![None; Site::count(heads)];
    let mut run = |site: Site,
                   input: &DenseMatrix,
                   executor: &mut dyn ProjectionExecutor,
                   counter: &mut OpCounter|
     -> Result<DenseMatrix> {
        let out = executor.project(layer, site, input, weights.site(site), counter)?;
        if trace.is_some() {
            slots[site.index(heads)] = Some(SiteActivation {
                input: input.clone(),
                output: out.clone(),
            });
        }
        Ok(out)
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = run(Site::Query(i), x, executor, counter)?;
        let k = run(Site::Key(i), x, executor, counter)?;
        let v = run(Site::Value(i), x, executor, counter)?;
        head_outputs.push(attention(&q, &k, &v, counter)?);
    }
    let mut x1 = x.clone();
    for (i, h) in head_outputs.iter().enumerate() {
        let o = run(Site::Output(i), h, executor, counter)?;
        x1.add_assign(&o)?;
    }
    let hidden = run(Site::Ffn1, &x1, executor, counter)?.map(gelu);
    let f = run(Site::Ffn2, &hidden, executor, counter)?;
    let mut x2 = x1;
    x2.add_assign(&f)?;
    if post_norm {
        normalize_rows(&mut x2);
    }
    if let Some(t) = trace {
        t.clear();
        t.extend(slots.into_iter().map(|s| s.expect("every site ran")));
    }
    Ok(x2)
}

/// Applies all blocks in sequence and records every projection site.
pub fn backbone_forward(
    tokens: &DenseMatrix,
    config: &BackboneConfig,
    weights: &[BlockWeights],
    executor: &mut dyn ProjectionExecutor,
    counter: &mut OpCounter,
) -> Result<(DenseMatrix, ActivationTrace)> {
    if weights.len() != config.layers {
        return Err(Error::Config(format!(
            "{} blocks of weights for {} layers",
            weights.len(),
            config.layers
        )));
    }
    if tokens.shape() != (config.tokens, config.dim) {
        return Err(Error::shape("backbone input", tokens.shape(), (config.tokens, config.dim)));
    }
    let mut trace = ActivationTrace {
        layers: Vec::with_capacity(config.layers),
    };
    let mut x = tokens.clone();
    for (l, w) in weights.iter().enumerate() {
        let mut sites = Vec::new();
        x = block_forward(&x, w, l, config.post_norm, executor, counter, Some(&mut sites))?;
        trace.layers.push(sites);
    }
    Ok((x, trace))
}

/// Per-token affine head. Always dense and not counted.
pub fn head_forward(features: &DenseMatrix, head: &TaskHead) -> Result<DenseMatrix> {
    let mut scratch = OpCounter::new();
    let mut out = dense_matmul(features, &head.weight, &mut scratch)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&head.bias) {
            *o += b;
        }
    }
    Ok(out)
}
