//! Training objectives over flat parameter vectors.
//!
//! Every objective returns `(loss, gradient)` with the gradient laid out like
//! the parameters' `pack()` output, so the optimizer and finite-difference
//! checks treat all stages alike.

use serde::{Deserialize, Serialize};

use super::backprop::{mse, net_backward, net_forward, NetGrads, NetTape};
use super::gate::HardConcreteGate;
use super::synth::Clip;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{CsrMatrix, DenseMatrix};
use crate::transformer::{BlockWeights, Site, TaskHead};

fn push(out: &mut Vec<f64>, m: &DenseMatrix) {
    out.extend_from_slice(m.as_slice());
}

fn pull(flat: &[f64], pos: &mut usize, m: &mut DenseMatrix) {
    let n = m.len();
    m.as_mut_slice().copy_from_slice(&flat[*pos..*pos + n]);
    *pos += n;
}

fn push_head(out: &mut Vec<f64>, h: &TaskHead) {
    push(out, &h.weight);
    out.extend_from_slice(&h.bias);
}

fn pull_head(flat: &[f64], pos: &mut usize, h: &mut TaskHead) {
    pull(flat, pos, &mut h.weight);
    let n = h.bias.len();
    h.bias.copy_from_slice(&flat[*pos..*pos + n]);
    *pos += n;
}

/// Parameters that round-trip through a flat vector.
pub trait FlatParams {
    fn pack(&self) -> Vec<f64>;
    fn unpack(&mut self, flat: &[f64]);
}

/// The base task: shared patch embedding, backbone and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub embedding: DenseMatrix,
    pub blocks: Vec<BlockWeights>,
    pub head: TaskHead,
    pub post_norm: bool,
}

impl FlatParams for BaseModel {
    fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        push(&mut out, &self.embedding);
        for b in &self.blocks {
            for s in Site::all(b.heads()) {
                push(&mut out, b.site(s));
            }
        }
        push_head(&mut out, &self.head);
        out
    }

    fn unpack(&mut self, flat: &[f64]) {
        let mut pos = 0;
        pull(flat, &mut pos, &mut self.embedding);
        for b in &mut self.blocks {
            for s in Site::all(b.heads()).collect::<Vec<_>>() {
                pull(flat, &mut pos, b.site_mut(s));
            }
        }
        pull_head(flat, &mut pos, &mut self.head);
    }
}

/// Stage-one parameters: dense deltas, their gate logits and the task head.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedDeltas {
    /// `[layer][site]`, each `D x D`.
    pub deltas: Vec<Vec<DenseMatrix>>,
    pub log_alpha: Vec<Vec<DenseMatrix>>,
    pub head: TaskHead,
}

impl GatedDeltas {
    pub fn new(layers: usize, sites: usize, dim: usize, log_alpha: f64, head: TaskHead) -> Self {
        Self {
            deltas: vec![vec![DenseMatrix::zeros(dim, dim); sites]; layers],
            log_alpha: vec![vec![DenseMatrix::filled(dim, dim, log_alpha); sites]; layers],
            head,
        }
    }

    fn element_count(&self) -> usize {
        self.deltas.iter().flatten().map(DenseMatrix::len).sum()
    }
}

impl FlatParams for GatedDeltas {
    fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in self.deltas.iter().flatten().chain(self.log_alpha.iter().flatten()) {
            push(&mut out, m);
        }
        push_head(&mut out, &self.head);
        out
    }

    fn unpack(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for m in self.deltas.iter_mut().flatten().chain(self.log_alpha.iter_mut().flatten()) {
            pull(flat, &mut pos, m);
        }
        pull_head(flat, &mut pos, &mut self.head);
    }
}

/// Deltas with a frozen sparsity pattern plus the task head.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDeltas {
    pub deltas: Vec<Vec<CsrMatrix>>,
    pub head: TaskHead,
}

impl FlatParams for MaskedDeltas {
    fn pack(&self) -> Vec<f64> {
        let mut out: Vec<f64> =
            self.deltas.iter().flatten().flat_map(|m| m.values().iter().copied()).collect();
        push_head(&mut out, &self.head);
        out
    }

    fn unpack(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for m in self.deltas.iter_mut().flatten() {
            let n = m.nnz();
            m.values_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        pull_head(flat, &mut pos, &mut self.head);
    }
}

/// Activation-difference penalty weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTerms {
    pub lambda_a1: f64,
    pub lambda_a2: f64,
    /// Temporal offsets `tau_min..=tau_max`, zero excluded.
    pub tau_min: i64,
    pub tau_max: i64,
}

impl ActivationTerms {
    pub const NONE: Self = Self { lambda_a1: 0.0, lambda_a2: 0.0, tau_min: 0, tau_max: 0 };

    fn offsets(&self) -> impl Iterator<Item = i64> {
        (self.tau_min..=self.tau_max).filter(|t| *t != 0)
    }
}

/// Site inputs `[layer][site]` of one frame.
pub type SiteInputs = Vec<Vec<DenseMatrix>>;

fn site_inputs(tape: &NetTape, heads: usize) -> SiteInputs {
    (0..tape.blocks.len())
        .map(|l| Site::all(heads).map(|s| tape.site_input(l, s).clone()).collect())
        .collect()
}

/// Base-task site inputs for every frame of every clip, `[clip][frame]`.
pub fn base_site_inputs(base: &BaseModel, clips: &[Clip]) -> Result<Vec<Vec<SiteInputs>>> {
    let heads = base.blocks.first().map_or(0, BlockWeights::heads);
    par::map_range(clips.len(), |c| {
        clips[c]
            .frames
            .iter()
            .map(|f| {
                let tape = net_forward(f, &base.embedding, &base.blocks, &base.head, base.post_norm)?;
                Ok(site_inputs(&tape, heads))
            })
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

fn sum_in_order(parts: Vec<Result<(f64, Vec<f64>)>>, len: usize, count: usize) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; len];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = count.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn frame_loss(
    patches: &DenseMatrix,
    target: &DenseMatrix,
    embedding: &DenseMatrix,
    blocks: &[BlockWeights],
    head: &TaskHead,
    post_norm: bool,
) -> Result<(f64, NetGrads)> {
    let tape = net_forward(patches, embedding, blocks, head, post_norm)?;
    let (loss, d) = mse(&tape.logits, target)?;
    Ok((loss, net_backward(&tape, blocks, head, &d, None)?))
}

/// Mean per-frame task loss of the base model and its gradient.
pub fn base_objective(
    model: &BaseModel,
    frames: &[(&DenseMatrix, &DenseMatrix)],
) -> Result<(f64, Vec<f64>)> {
    let len = model.pack().len();
    let parts = par::map_range(frames.len(), |i| {
        let (p, t) = frames[i];
        let (loss, g) = frame_loss(p, t, &model.embedding, &model.blocks, &model.head, model.post_norm)?;
        let mut flat = Vec::with_capacity(len);
        push(&mut flat, &g.embedding);
        for l in &g.blocks {
            for m in l {
                push(&mut flat, m);
            }
        }
        push_head(&mut flat, &g.head);
        Ok((loss, flat))
    });
    sum_in_order(parts, len, frames.len())
}

fn effective_blocks(
    base: &[BlockWeights],
    extra: impl Fn(usize, usize) -> DenseMatrix,
) -> Result<Vec<BlockWeights>> {
    base.iter()
        .enumerate()
        .map(|(l, b)| {
            let heads = b.heads();
            let sites = Site::all(heads)
                .enumerate()
                .map(|(s, site)| b.site(site).add(&extra(l, s)))
                .collect::<Result<Vec<_>>>()?;
            BlockWeights::from_sites(heads, sites)
        })
        .collect()
}

/// Stage-one objective: mean task loss with weights `W + delta * gate(u)` plus
/// `lambda_w * sum expected_l0`. `noise[l][s]` holds the gate draws.
pub fn l0_objective(
    base: &BaseModel,
    params: &GatedDeltas,
    noise: &[Vec<DenseMatrix>],
    gate: &HardConcreteGate,
    lambda_w: f64,
    frames: &[(&DenseMatrix, &DenseMatrix)],
) -> Result<(f64, Vec<f64>)> {
    // gates[l][s] and d gate / d log_alpha
    let mut gates = Vec::with_capacity(params.deltas.len());
    let mut slopes = Vec::with_capacity(params.deltas.len());
    for (la, u) in params.log_alpha.iter().zip(noise) {
        let (mut gl, mut sl) = (Vec::new(), Vec::new());
        for (a, n) in la.iter().zip(u) {
            let mut g = DenseMatrix::zeros(a.rows(), a.cols());
            let mut s = DenseMatrix::zeros(a.rows(), a.cols());
            for i in 0..a.len() {
                let (gv, sv) = gate.sample_with_grad(a.as_slice()[i], n.as_slice()[i])?;
                g.as_mut_slice()[i] = gv;
                s.as_mut_slice()[i] = sv;
            }
            gl.push(g);
            sl.push(s);
        }
        gates.push(gl);
        slopes.push(sl);
    }
    let blocks = effective_blocks(&base.blocks, |l, s| {
        let mut m = params.deltas[l][s].clone();
        for (v, g) in m.as_mut_slice().iter_mut().zip(gates[l][s].as_slice()) {
            *v *= g;
        }
        m
    })?;
    let elements = params.element_count();
    let len = 2 * elements + params.head.param_count();
    let parts = par::map_range(frames.len(), |i| {
        let (p, t) = frames[i];
        let (loss, g) = frame_loss(p, t, &base.embedding, &blocks, &params.head, base.post_norm)?;
        let mut d_delta = Vec::with_capacity(elements);
        let mut d_alpha = Vec::with_capacity(elements);
        for (l, layer) in g.blocks.iter().enumerate() {
            for (s, dw) in layer.iter().enumerate() {
                let delta = params.deltas[l][s].as_slice();
                let gate_v = gates[l][s].as_slice();
                let slope = slopes[l][s].as_slice();
                for (j, d) in dw.as_slice().iter().enumerate() {
                    d_delta.push(d * gate_v[j]);
                    d_alpha.push(d * delta[j] * slope[j]);
                }
            }
        }
        d_delta.extend(d_alpha);
        push_head(&mut d_delta, &g.head);
        Ok((loss, d_delta))
    });
    let (mut loss, mut grad) = sum_in_order(parts, len, frames.len())?;
    if lambda_w != 0.0 {
        for (j, a) in params.log_alpha.iter().flatten().flat_map(|m| m.as_slice()).enumerate() {
            loss += lambda_w * gate.expected_l0(*a);
            grad[elements + j] += lambda_w * gate.expected_l0_grad(*a);
        }
    }
    Ok((loss, grad))
}

/// Stage-two/three objective over the pattern-frozen delta values:
///
/// per frame `t`: `mse + lambda_a1 * sum |X_t - X_base_t|
///                     + sum_tau lambda_a2 * |X_{t+tau} - X_t|`
///
/// summed over every projection-site input and averaged over all frames of
/// `clips`. `base_inputs[clip][frame]` are the base task's site inputs and
/// may be empty when `lambda_a1 == 0`.
pub fn masked_objective(
    base: &BaseModel,
    params: &MaskedDeltas,
    terms: &ActivationTerms,
    clips: &[Clip],
    task: usize,
    base_inputs: &[Vec<SiteInputs>],
) -> Result<(f64, Vec<f64>)> {
    if terms.lambda_a1 != 0.0 && base_inputs.len() != clips.len() {
        return Err(Error::InvalidArgument("base activations missing for task penalty".into()));
    }
    let heads = base.blocks.first().map_or(0, BlockWeights::heads);
    let blocks = effective_blocks(&base.blocks, |l, s| params.deltas[l][s].to_dense())?;
    let nnz: usize = params.deltas.iter().flatten().map(CsrMatrix::nnz).sum();
    let len = nnz + params.head.param_count();
    let total_frames: usize = clips.iter().map(|c| c.frames.len()).sum();

    let parts = par::map_range(clips.len(), |c| -> Result<(f64, Vec<f64>)> {
        let clip = &clips[c];
        let t_len = clip.frames.len();
        let tapes = clip
            .frames
            .iter()
            .map(|f| net_forward(f, &base.embedding, &blocks, &params.head, base.post_norm))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<SiteInputs> = tapes.iter().map(|t| site_inputs(t, heads)).collect();
        let mut extra: Vec<SiteInputs> = inputs
            .iter()
            .map(|f| f.iter().map(|l| l.iter().map(|m| DenseMatrix::zeros(m.rows(), m.cols())).collect()).collect())
            .collect();
        let mut loss = 0.0;
        for t in 0..t_len {
            for l in 0..blocks.len() {
                for s in 0..inputs[t][l].len() {
                    let x = inputs[t][l][s].as_slice();
                    if terms.lambda_a1 != 0.0 {
                        let b = base_inputs[c][t][l][s].as_slice();
                        let g = extra[t][l][s].as_mut_slice();
                        for j in 0..x.len() {
                            let d = x[j] - b[j];
                            loss += terms.lambda_a1 * d.abs();
                            g[j] += terms.lambda_a1 * sign(d);
                        }
                    }
                    if terms.lambda_a2 != 0.0 {
                        for tau in terms.offsets() {
                            let u = t as i64 + tau;
                            if u < 0 || u >= t_len as i64 {
                                continue;
                            }
                            let u = u as usize;
                            let y = inputs[u][l][s].as_slice();
                            let mut d_t = vec![0.0; x.len()];
                            let mut d_u = vec![0.0; x.len()];
                            for j in 0..x.len() {
                                let d = y[j] - x[j];
                                loss += terms.lambda_a2 * d.abs();
                                d_u[j] = terms.lambda_a2 * sign(d);
                                d_t[j] = -d_u[j];
                            }
                            for (a, b) in extra[t][l][s].as_mut_slice().iter_mut().zip(&d_t) {
                                *a += b;
                            }
                            for (a, b) in extra[u][l][s].as_mut_slice().iter_mut().zip(&d_u) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
        let mut grad = vec![0.0; len];
        for t in 0..t_len {
            let (l_t, d) = mse(&tapes[t].logits, &clip.targets[task][t])?;
            loss += l_t;
            let g = net_backward(&tapes[t], &blocks, &params.head, &d, Some(&extra[t]))?;
            let mut pos = 0;
            for (l, layer) in params.deltas.iter().enumerate() {
                for (s, m) in layer.iter().enumerate() {
                    let dw = &g.blocks[l][s];
                    for (r, col, _) in m.iter() {
                        grad[pos] += dw.get(r, col);
                        pos += 1;
                    }
                }
            }
            for (a, b) in grad[pos..].iter_mut().zip(g.head.weight.as_slice().iter().chain(&g.head.bias)) {
                *a += b;
            }
        }
        Ok((loss, grad))
    });
    sum_in_order(parts, len, total_frames)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum()
    }
}
