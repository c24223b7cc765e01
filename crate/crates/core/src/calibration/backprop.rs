//! Recorded forward passes and their exact reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{dense_matmul, DenseMatrix, OpCounter};
use crate::transformer::{embed, gelu, gelu_grad, softmax_rows, BlockWeights, Site, TaskHead};

const NORM_EPS: f64 = 1e-5;

fn mm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    dense_matmul(a, b, &mut OpCounter::new())
}

/// `a^T b`
fn mm_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    mm(&a.transpose(), b)
}

/// `a b^T`
fn mm_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    mm(a, &b.transpose())
}

/// Intermediates of one block needed by the reverse pass.
#[derive(Clone, Debug)]
pub struct BlockTape {
    pub x: DenseMatrix,
    pub q: Vec<DenseMatrix>,
    pub k: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    pub probs: Vec<DenseMatrix>,
    pub heads: Vec<DenseMatrix>,
    pub x1: DenseMatrix,
    pub pre: DenseMatrix,
    pub hidden: DenseMatrix,
    /// Normalized output and per-row `1 / sqrt(var + eps)`.
    pub norm: Option<(DenseMatrix, Vec<f64>)>,
    pub out: DenseMatrix,
}

impl BlockTape {
    pub fn site_input(&self, site: Site) -> &DenseMatrix {
        match site {
            Site::Query(_) | Site::Key(_) | Site::Value(_) => &self.x,
            Site::Output(i) => &self.heads[i],
            Site::Ffn1 => &self.x1,
            Site::Ffn2 => &self.hidden,
        }
    }
}

pub fn block_forward_tape(x: &DenseMatrix, w: &BlockWeights, post_norm: bool) -> Result<BlockTape> {
    let heads = w.heads();
    let scale = 1.0 / (w.dim() as f64).sqrt();
    let (mut qs, mut ks, mut vs, mut ps, mut hs) = (vec![], vec![], vec![], vec![], vec![]);
    for i in 0..heads {
        let q = mm(x, w.site(Site::Query(i)))?;
        let k = mm(x, w.site(Site::Key(i)))?;
        let v = mm(x, w.site(Site::Value(i)))?;
        let mut s = mm_nt(&q, &k)?;
        s.scale(scale);
        softmax_rows(&mut s);
        hs.push(mm(&s, &v)?);
        qs.push(q);
        ks.push(k);
        vs.push(v);
        ps.push(s);
    }
    let mut x1 = x.clone();
    for (i, h) in hs.iter().enumerate() {
        x1.add_assign(&mm(h, w.site(Site::Output(i)))?)?;
    }
    let pre = mm(&x1, w.site(Site::Ffn1))?;
    let hidden = pre.map(gelu);
    let mut x2 = x1.clone();
    x2.add_assign(&mm(&hidden, w.site(Site::Ffn2))?)?;
    let (norm, out) = if post_norm {
        let mut y = x2;
        let n = y.cols() as f64;
        let mut invs = Vec::with_capacity(y.rows());
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            invs.push(inv);
        }
        (Some((y.clone(), invs)), y)
    } else {
        (None, x2)
    };
    Ok(BlockTape { x: x.clone(), q: qs, k: ks, v: vs, probs: ps, heads: hs, x1, pre, hidden, norm, out })
}

/// Reverse pass through one block. `input_grads`, indexed by canonical site
/// order, are extra gradients arriving directly at site inputs. Returns the
/// gradient w.r.t. the block input and per-site weight gradients.
pub fn block_backward(
    tape: &BlockTape,
    w: &BlockWeights,
    d_out: &DenseMatrix,
    input_grads: Option<&[DenseMatrix]>,
) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let heads = w.heads();
    let dim = w.dim();
    let scale = 1.0 / (dim as f64).sqrt();
    let inject = |site: Site, g: &mut DenseMatrix| -> Result<()> {
        if let Some(extra) = input_grads {
            g.add_assign(&extra[site.index(heads)])?;
        }
        Ok(())
    };
    let mut dw = vec![DenseMatrix::zeros(dim, dim); Site::count(heads)];

    let d_x2 = match &tape.norm {
        None => d_out.clone(),
        Some((y, invs)) => {
            let n = y.cols() as f64;
            DenseMatrix::from_vec(
                y.rows(),
                y.cols(),
                (0..y.rows())
                    .flat_map(|r| {
                        let (dy, yr) = (d_out.row(r), y.row(r));
                        let mean_dy = dy.iter().sum::<f64>() / n;
                        let mean_dyy = dy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        let inv = invs[r];
                        dy.iter()
                            .zip(yr)
                            .map(move |(g, yv)| inv * (g - mean_dy - yv * mean_dyy))
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            )?
        }
    };

    dw[Site::Ffn2.index(heads)] = mm_tn(&tape.hidden, &d_x2)?;
    let mut d_hidden = mm_nt(&d_x2, w.site(Site::Ffn2))?;
    inject(Site::Ffn2, &mut d_hidden)?;
    let mut d_pre = d_hidden;
    for (g, p) in d_pre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
        *g *= gelu_grad(*p);
    }
    dw[Site::Ffn1.index(heads)] = mm_tn(&tape.x1, &d_pre)?;
    let mut d_x1_ffn = mm_nt(&d_pre, w.site(Site::Ffn1))?;
    inject(Site::Ffn1, &mut d_x1_ffn)?;
    let mut d_x1 = d_x2;
    d_x1.add_assign(&d_x1_ffn)?;

    let mut dx = d_x1.clone();
    for i in 0..heads {
        dw[Site::Output(i).index(heads)] = mm_tn(&tape.heads[i], &d_x1)?;
        let mut d_head = mm_nt(&d_x1, w.site(Site::Output(i)))?;
        inject(Site::Output(i), &mut d_head)?;

        let a = &tape.probs[i];
        let d_a = mm_nt(&d_head, &tape.v[i])?;
        let d_v = mm_tn(a, &d_head)?;
        let mut d_s = d_a;
        for r in 0..d_s.rows() {
            let ar = a.row(r);
            let dot: f64 = d_s.row(r).iter().zip(ar).map(|(g, p)| g * p).sum();
            for (g, p) in d_s.row_mut(r).iter_mut().zip(ar) {
                *g = p * (*g - dot) * scale;
            }
        }
        let d_q = mm(&d_s, &tape.k[i])?;
        let d_k = mm_tn(&d_s, &tape.q[i])?;
        for (site, g) in [(Site::Query(i), d_q), (Site::Key(i), d_k), (Site::Value(i), d_v)] {
            dw[site.index(heads)] = mm_tn(&tape.x, &g)?;
            dx.add_assign(&mm_nt(&g, w.site(site))?)?;
            inject(site, &mut dx)?;
        }
    }
    Ok((dx, dw))
}

/// Full recorded pass from patches to head outputs.
#[derive(Clone, Debug)]
pub struct NetTape {
    pub patches: DenseMatrix,
    pub blocks: Vec<BlockTape>,
    pub features: DenseMatrix,
    pub logits: DenseMatrix,
}

impl NetTape {
    pub fn site_input(&self, layer: usize, site: Site) -> &DenseMatrix {
        self.blocks[layer].site_input(site)
    }
}

#[derive(Clone, Debug)]
pub struct NetGrads {
    pub embedding: DenseMatrix,
    /// `[layer][site]` in canonical site order.
    pub blocks: Vec<Vec<DenseMatrix>>,
    pub head: TaskHead,
}

pub fn net_forward(
    patches: &DenseMatrix,
    embedding: &DenseMatrix,
    blocks: &[BlockWeights],
    head: &TaskHead,
    post_norm: bool,
) -> Result<NetTape> {
    let mut x = embed(patches, embedding, &mut OpCounter::new())?;
    let mut tapes = Vec::with_capacity(blocks.len());
    for w in blocks {
        let t = block_forward_tape(&x, w, post_norm)?;
        x = t.out.clone();
        tapes.push(t);
    }
    let mut logits = mm(&x, &head.weight)?;
    for r in 0..logits.rows() {
        for (o, b) in logits.row_mut(r).iter_mut().zip(&head.bias) {
            *o += b;
        }
    }
    Ok(NetTape { patches: patches.clone(), blocks: tapes, features: x, logits })
}

/// Reverse pass for the whole network given `d loss / d logits`.
/// `input_grads[layer][site]` are added at projection-site inputs.
pub fn net_backward(
    tape: &NetTape,
    blocks: &[BlockWeights],
    head: &TaskHead,
    d_logits: &DenseMatrix,
    input_grads: Option<&[Vec<DenseMatrix>]>,
) -> Result<NetGrads> {
    if input_grads.is_some_and(|g| g.len() != blocks.len()) {
        return Err(Error::InvalidArgument("input gradients do not cover every layer".into()));
    }
    let head_weight = mm_tn(&tape.features, d_logits)?;
    let bias = (0..d_logits.cols())
        .map(|c| (0..d_logits.rows()).map(|r| d_logits.get(r, c)).sum())
        .collect();
    let mut d = mm_nt(d_logits, &head.weight)?;
    let mut grads = vec![Vec::new(); blocks.len()];
    for l in (0..blocks.len()).rev() {
        let extra = input_grads.map(|g| g[l].as_slice());
        let (dx, dw) = block_backward(&tape.blocks[l], &blocks[l], &d, extra)?;
        grads[l] = dw;
        d = dx;
    }
    Ok(NetGrads {
        embedding: mm_tn(&tape.patches, &d)?,
        blocks: grads,
        head: TaskHead { weight: head_weight, bias },
    })
}

/// Mean squared error over all entries and its gradient.
pub fn mse(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let diff = pred.sub(target)?;
    let n = diff.len().max(1) as f64;
    let loss = diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.map(|v| 2.0 * v / n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{block_forward, DenseExecutor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn tape_matches_inference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = BlockWeights::random(6, 2, 1.0, &mut rng);
        let x = DenseMatrix::from_fn(5, 6, |_, _| StandardNormal.sample(&mut rng));
        for post_norm in [false, true] {
            let tape = block_forward_tape(&x, &w, post_norm).unwrap();
            let out = block_forward(&x, &w, 0, post_norm, &mut DenseExecutor, &mut OpCounter::new(), None)
                .unwrap();
            assert!(tape.out.max_abs_diff(&out) < 1e-12);
        }
    }
}
