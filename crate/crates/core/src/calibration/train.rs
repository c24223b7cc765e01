use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Open01};
use serde::{Deserialize, Serialize};

use super::backprop::mse;
use super::gate::HardConcreteGate;
use super::objective::{
    base_objective, base_site_inputs, l0_objective, masked_objective, ActivationTerms, BaseModel,
    FlatParams, GatedDeltas, MaskedDeltas,
};
use super::synth::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::planner::{ReusePlan, Strategy, SubTaskPlan};
use crate::reuse::{run_frame, DensityStats, FrameCaches, Runtime};
use crate::store::{DeltaModel, ModelBundle, TaskId};
use crate::tensor::{CsrMatrix, DenseMatrix};
use crate::transformer::{BackboneConfig, BlockWeights, TaskHead};
use crate::par;

/// Every knob of the calibration pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub post_norm: bool,
    /// Block weight init std is `init_scale / sqrt(dim)`.
    pub init_scale: f64,
    pub learning_rate: f64,
    /// Step size for gate logits in stage one.
    pub gate_learning_rate: f64,
    pub momentum: f64,
    /// Clips per step; 0 uses every clip.
    pub batch_clips: usize,
    pub base_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub lambda_w: f64,
    pub lambda_a1: f64,
    pub lambda_a2: f64,
    pub tau_min: i64,
    pub tau_max: i64,
    pub gate: HardConcreteGate,
    pub init_log_alpha: f64,
    /// Keep a delta element when its expected L0 reaches this value.
    pub threshold_prob: f64,
    /// Per-block delta-activation density the threshold search aims for.
    pub target_density: f64,
    /// Allowed relative toy-loss increase from thresholding.
    pub loss_budget: f64,
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub threshold_points: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 2,
            dim: 8,
            heads: 2,
            post_norm: false,
            init_scale: 0.5,
            learning_rate: 0.05,
            gate_learning_rate: 200.0,
            momentum: 0.9,
            batch_clips: 0,
            base_steps: 200,
            stage1_steps: 300,
            stage2_steps: 200,
            stage3_steps: 60,
            lambda_w: 0.0,
            lambda_a1: 0.0,
            lambda_a2: 0.0,
            tau_min: -2,
            tau_max: 2,
            gate: HardConcreteGate::default(),
            init_log_alpha: 0.0,
            threshold_prob: 0.5,
            target_density: 0.3,
            loss_budget: 0.1,
            threshold_min: 1e-3,
            threshold_max: 1.0,
            threshold_points: 16,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 || self.heads == 0 {
            return bad("dim and heads must be positive".into());
        }
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_a1", self.lambda_a1),
            ("lambda_a2", self.lambda_a2),
            ("loss_budget", self.loss_budget),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.tau_min >= -2 && self.tau_max <= 2 && self.tau_min <= self.tau_max) {
            return bad(format!(
                "temporal window [{}, {}] must lie within [-2, 2]",
                self.tau_min, self.tau_max
            ));
        }
        if !(self.learning_rate > 0.0 && self.gate_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.threshold_prob > 0.0 && self.threshold_prob <= 1.0) {
            return bad(format!("threshold_prob {} outside (0, 1]", self.threshold_prob));
        }
        if !(0.0..=1.0).contains(&self.target_density) {
            return bad(format!("target_density {} outside [0, 1]", self.target_density));
        }
        if !(self.threshold_min > 0.0 && self.threshold_max >= self.threshold_min)
            || self.threshold_points == 0
        {
            return bad("threshold grid needs 0 < min <= max and at least one point".into());
        }
        self.gate.validate()
    }

    pub fn activation_terms(&self) -> ActivationTerms {
        ActivationTerms {
            lambda_a1: self.lambda_a1,
            lambda_a2: self.lambda_a2,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
        }
    }

    /// `0` followed by a log-spaced grid, each value representable in `f32`.
    pub fn threshold_grid(&self) -> Vec<f64> {
        let n = self.threshold_points;
        let (lo, hi) = (self.threshold_min.ln(), self.threshold_max.ln());
        let mut grid = vec![0.0];
        for i in 0..n {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            grid.push((lo + t * (hi - lo)).exp() as f32 as f64);
        }
        grid.dedup();
        grid
    }

    fn rng(&self, task: usize, stage: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.wrapping_mul(0xD1B5_4A32_D192_ED03),
        )
    }
}

/// Gradient descent with heavy-ball momentum; step sizes are given per
/// contiguous parameter range.
pub struct Momentum {
    rates: Vec<(usize, f64)>,
    mu: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    /// `rates` lists `(end, step)` pairs covering `0..len` in order.
    pub fn new(len: usize, rates: Vec<(usize, f64)>, mu: f64) -> Self {
        Self { rates, mu, velocity: vec![0.0; len] }
    }

    pub fn uniform(len: usize, rate: f64, mu: f64) -> Self {
        Self::new(len, vec![(len, rate)], mu)
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let mut start = 0;
        for &(end, rate) in &self.rates {
            for i in start..end.min(params.len()) {
                self.velocity[i] = self.mu * self.velocity[i] + grad[i];
                params[i] -= rate * self.velocity[i];
            }
            start = end;
        }
    }
}

/// Picks clip subsets, reshuffling with a seeded generator every epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(clips: usize, size: usize, rng: ChaCha8Rng) -> Self {
        let size = if size == 0 { clips } else { size.min(clips) };
        Self { order: (0..clips).collect(), pos: clips, size, rng }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn subset(clips: &[Clip], idx: &[usize]) -> Vec<Clip> {
    idx.iter().map(|&i| clips[i].clone()).collect()
}

fn frames_of(clips: &[Clip], task: usize) -> Vec<(&DenseMatrix, &DenseMatrix)> {
    clips.iter().flat_map(|c| c.frames.iter().zip(&c.targets[task])).collect()
}

fn check_loss(loss: f64, grad: &[f64], stage: &'static str, step: usize) -> Result<()> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { stage, step })
    }
}

pub(crate) fn backbone_config(data: &Dataset, cfg: &CalibConfig) -> BackboneConfig {
    let mut c = BackboneConfig::new(cfg.layers, cfg.dim, cfg.heads, data.spec.tokens, data.spec.patch_dim);
    c.post_norm = cfg.post_norm;
    c
}

/// Random initial base model.
pub fn init_base(config: &BackboneConfig, classes: usize, cfg: &CalibConfig) -> BaseModel {
    let mut rng = cfg.rng(0, 0);
    let emb = Normal::new(0.0, 1.0 / (config.patch_dim as f64).sqrt()).expect("valid std");
    let embedding = DenseMatrix::from_fn(config.patch_dim, config.dim, |_, _| emb.sample(&mut rng));
    let blocks = (0..config.layers)
        .map(|_| BlockWeights::random(config.dim, config.heads, cfg.init_scale, &mut rng))
        .collect();
    let hd = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt()).expect("valid std");
    let head = TaskHead {
        weight: DenseMatrix::from_fn(config.dim, classes, |_, _| hd.sample(&mut rng)),
        bias: vec![0.0; classes],
    };
    BaseModel { embedding, blocks, head, post_norm: config.post_norm }
}

/// Stage zero: dense training of the base task (embedding, blocks, head).
pub fn train_base(model: &BaseModel, data: &Dataset, cfg: &CalibConfig) -> Result<(BaseModel, Vec<f64>)> {
    let mut model = model.clone();
    let mut flat = model.pack();
    let mut opt = Momentum::uniform(flat.len(), cfg.learning_rate, cfg.momentum);
    let mut batches = Batches::new(data.clips.len(), cfg.batch_clips, cfg.rng(0, 1));
    let mut history = Vec::with_capacity(cfg.base_steps);
    for step in 0..cfg.base_steps {
        let clips = subset(&data.clips, &batches.next());
        model.unpack(&flat);
        let (loss, grad) = base_objective(&model, &frames_of(&clips, 0))?;
        check_loss(loss, &grad, "base", step)?;
        history.push(loss);
        opt.step(&mut flat, &grad);
    }
    model.unpack(&flat);
    Ok((model, history))
}

/// A sub-task during stage one.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub task: TaskId,
    pub params: GatedDeltas,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    /// Zero deltas, uniform gate logits, head copied from the base.
    pub fn new(task: TaskId, base: &BaseModel, cfg: &CalibConfig) -> Self {
        let layers = base.blocks.len();
        let heads = base.blocks.first().map_or(cfg.heads, BlockWeights::heads);
        let dim = base.embedding.cols();
        Self {
            task,
            params: GatedDeltas::new(layers, 4 * heads + 2, dim, cfg.init_log_alpha, base.head.clone()),
            loss_history: Vec::new(),
        }
    }

    pub fn mean_expected_l0(&self, gate: &HardConcreteGate) -> f64 {
        let all: Vec<f64> = self
            .params
            .log_alpha
            .iter()
            .flatten()
            .flat_map(|m| m.as_slice().iter().map(|a| gate.expected_l0(*a)))
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

fn draw_noise(like: &[Vec<DenseMatrix>], rng: &mut ChaCha8Rng) -> Vec<Vec<DenseMatrix>> {
    like.iter()
        .map(|l| {
            l.iter()
                .map(|m| DenseMatrix::from_fn(m.rows(), m.cols(), |_, _| Open01.sample(rng)))
                .collect()
        })
        .collect()
}

/// Stage one: learns dense deltas and their Hard-Concrete gates under the
/// expected-L0 penalty, drawing fresh gate noise each step. The base model
/// is read only.
pub fn stage1_train_l0(
    state: &TrainState,
    base: &BaseModel,
    data: &Dataset,
    cfg: &CalibConfig,
) -> Result<TrainState> {
    let task = state.task.index;
    let mut state = state.clone();
    let mut flat = state.params.pack();
    let n = state.params.deltas.iter().flatten().map(DenseMatrix::len).sum::<usize>();
    let mut opt = Momentum::new(
        flat.len(),
        vec![(n, cfg.learning_rate), (2 * n, cfg.gate_learning_rate), (flat.len(), cfg.learning_rate)],
        cfg.momentum,
    );
    let mut rng = cfg.rng(task, 2);
    let mut batches = Batches::new(data.clips.len(), cfg.batch_clips, cfg.rng(task, 3));
    for step in 0..cfg.stage1_steps {
        state.params.unpack(&flat);
        let noise = draw_noise(&state.params.log_alpha, &mut rng);
        let clips = subset(&data.clips, &batches.next());
        let (loss, grad) =
            l0_objective(base, &state.params, &noise, &cfg.gate, cfg.lambda_w, &frames_of(&clips, task))?;
        check_loss(loss, &grad, "stage1", step)?;
        state.loss_history.push(loss);
        opt.step(&mut flat, &grad);
    }
    state.params.unpack(&flat);
    Ok(state)
}

/// Fixes the sparsity pattern: elements whose expected L0 reaches
/// `threshold_prob` keep `delta * deterministic_gate`, the rest are dropped.
pub fn binarize_and_fix(
    state: &TrainState,
    gate: &HardConcreteGate,
    threshold_prob: f64,
) -> Result<DeltaModel> {
    if !(threshold_prob > 0.0 && threshold_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold_prob {threshold_prob} outside (0, 1]")));
    }
    let deltas = state
        .params
        .deltas
        .iter()
        .zip(&state.params.log_alpha)
        .map(|(dl, al)| {
            dl.iter()
                .zip(al)
                .map(|(d, a)| {
                    let kept = DenseMatrix::from_fn(d.rows(), d.cols(), |r, c| {
                        let la = a.get(r, c);
                        if gate.expected_l0(la) >= threshold_prob {
                            d.get(r, c) * gate.deterministic(la)
                        } else {
                            0.0
                        }
                    });
                    CsrMatrix::from_dense(&kept)
                })
                .collect()
        })
        .collect::<Vec<Vec<_>>>();
    let layers = deltas.len();
    Ok(DeltaModel {
        task: state.task.clone(),
        deltas,
        thresholds: vec![0.0; layers],
        head: state.params.head.clone(),
    })
}

fn train_masked(
    model: &DeltaModel,
    base: &BaseModel,
    data: &Dataset,
    cfg: &CalibConfig,
    terms: &ActivationTerms,
    steps: usize,
    stage: &'static str,
) -> Result<(DeltaModel, Vec<f64>)> {
    let task = model.task.index;
    let mut params = MaskedDeltas { deltas: model.deltas.clone(), head: model.head.clone() };
    let mut flat = params.pack();
    let mut opt = Momentum::uniform(flat.len(), cfg.learning_rate, cfg.momentum);
    let seed_stage = if stage == "stage2" { 4 } else { 6 };
    let mut batches = Batches::new(data.clips.len(), cfg.batch_clips, cfg.rng(task, seed_stage));
    let base_inputs = if terms.lambda_a1 != 0.0 && steps > 0 {
        base_site_inputs(base, &data.clips)?
    } else {
        Vec::new()
    };
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        params.unpack(&flat);
        let idx = batches.next();
        let clips = subset(&data.clips, &idx);
        let inputs: Vec<_> = if base_inputs.is_empty() {
            Vec::new()
        } else {
            idx.iter().map(|&i| base_inputs[i].clone()).collect()
        };
        let (loss, grad) = masked_objective(base, &params, terms, &clips, task, &inputs)?;
        check_loss(loss, &grad, stage, step)?;
        history.push(loss);
        opt.step(&mut flat, &grad);
    }
    params.unpack(&flat);
    let mut deltas = params.deltas;
    for d in deltas.iter_mut().flatten() {
        d.prune_zeros();
    }
    Ok((
        DeltaModel { task: model.task.clone(), deltas, thresholds: model.thresholds.clone(), head: params.head },
        history,
    ))
}

/// Stage two: fine-tunes the surviving delta values and the head.
pub fn stage2_finetune(
    model: &DeltaModel,
    base: &BaseModel,
    data: &Dataset,
    cfg: &CalibConfig,
) -> Result<(DeltaModel, Vec<f64>)> {
    train_masked(model, base, data, cfg, &ActivationTerms::NONE, cfg.stage2_steps, "stage2")
}

/// Stage three: as stage two plus L1 penalties on task and temporal
/// activation differences.
pub fn stage3_activation_sparsify(
    model: &DeltaModel,
    base: &BaseModel,
    data: &Dataset,
    cfg: &CalibConfig,
) -> Result<(DeltaModel, Vec<f64>)> {
    if cfg.lambda_a2 != 0.0 && data.spec.frames < 5 {
        return Err(Error::Config(format!(
            "temporal penalty needs clips of at least 5 frames, dataset has {}",
            data.spec.frames
        )));
    }
    train_masked(model, base, data, cfg, &cfg.activation_terms(), cfg.stage3_steps, "stage3")
}

/// Threshold outcome for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockThreshold {
    pub threshold: f64,
    /// Measured delta-activation density of the block at `threshold`.
    pub density: f64,
    /// Mean toy loss with all blocks chosen so far.
    pub loss: f64,
    /// False when no grid point met both the density target and the budget.
    pub attained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub task: String,
    pub reference_loss: f64,
    pub blocks: Vec<BlockThreshold>,
}

impl ThresholdChoice {
    pub fn thresholds(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.threshold).collect()
    }

    pub fn attained(&self) -> bool {
        self.blocks.iter().all(|b| b.attained)
    }
}

/// Mean toy loss and per-layer density of one task executed with reuse.
///
/// `bundle` holds the base plus at most the one sub-task being tuned. The
/// base runs temporal reuse after the first frame of each clip and reports
/// `S_a2`; a sub-task runs task reuse on every frame and reports `S_a1`.
pub fn reuse_loss_and_density(bundle: &ModelBundle, data: &Dataset, data_task: usize) -> Result<(f64, Vec<f64>)> {
    let rt = Runtime::new(bundle)?;
    let cfg = &bundle.config;
    let sub = !bundle.sub_tasks.is_empty();
    let plan = if sub {
        ReusePlan::new(
            Strategy::TaskOnly,
            1,
            cfg.layers,
            vec![SubTaskPlan { task: bundle.sub_tasks[0].task.name.clone(), boundary: cfg.layers }],
        )?
    } else {
        ReusePlan::new(Strategy::Combined, data.spec.frames.max(1), cfg.layers, Vec::new())?
    };
    let slot = usize::from(sub);
    let per_clip = par::map_range(data.clips.len(), |c| -> Result<(f64, Vec<_>)> {
        let clip = &data.clips[c];
        let mut caches = FrameCaches::new(rt.task_count());
        let mut loss = 0.0;
        let mut records = Vec::new();
        for (t, f) in clip.frames.iter().enumerate() {
            let r = run_frame(&rt, &plan.frame_plan(t as u64), f, &mut caches)?;
            let task = &r.tasks[slot];
            loss += mse(&task.predictions, &clip.targets[data_task][t])?.0;
            records.extend(task.sites.iter().cloned());
        }
        Ok((loss, records))
    });
    let mut loss = 0.0;
    let mut records = Vec::new();
    for p in per_clip {
        let (l, r) = p?;
        loss += l;
        records.extend(r);
    }
    let frames: usize = data.clips.iter().map(|c| c.frames.len()).sum();
    let stats = DensityStats::from_site_records("", cfg.layers, cfg.tokens, cfg.dim, &records);
    let density = if sub { stats.s_a1 } else { stats.s_a2 };
    Ok((loss / frames.max(1) as f64, density))
}

/// Per-block thresholds for task `task` (0 is the base) chosen block by
/// block: the smallest grid value whose measured density is at most
/// `target_density` while the loss stays within `(1 + loss_budget)` of the
/// unthresholded loss. When no grid value satisfies both, the lowest-density
/// value inside the budget is kept and the block is flagged.
pub fn select_thresholds(bundle: &ModelBundle, data: &Dataset, task: usize, cfg: &CalibConfig) -> Result<ThresholdChoice> {
    let mut trimmed = bundle.clone();
    trimmed.sub_tasks = if task == 0 {
        Vec::new()
    } else {
        let mut s = bundle.sub_tasks[task - 1].clone();
        s.task.index = 1;
        vec![s]
    };
    let layers = bundle.config.layers;
    let set = |b: &mut ModelBundle, th: &[f64]| {
        if task == 0 {
            b.config.thresholds = th.to_vec();
        } else {
            b.sub_tasks[0].thresholds = th.to_vec();
        }
    };
    let mut chosen = vec![0.0; layers];
    set(&mut trimmed, &chosen);
    let (reference_loss, _) = reuse_loss_and_density(&trimmed, data, task)?;
    let budget = reference_loss * (1.0 + cfg.loss_budget);
    let grid = cfg.threshold_grid();
    let mut blocks = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut best: Option<BlockThreshold> = None;
        let mut pick = None;
        for &th in &grid {
            let mut trial = chosen.clone();
            trial[l] = th;
            set(&mut trimmed, &trial);
            let (loss, density) = reuse_loss_and_density(&trimmed, data, task)?;
            if loss > budget {
                continue;
            }
            let point = BlockThreshold { threshold: th, density: density[l], loss, attained: false };
            if density[l] <= cfg.target_density {
                pick = Some(BlockThreshold { attained: true, ..point });
                break;
            }
            if best.as_ref().is_none_or(|b| point.density < b.density) {
                best = Some(point);
            }
        }
        let block = match (pick, best) {
            (Some(p), _) => p,
            (None, Some(b)) => b,
            (None, None) => BlockThreshold { threshold: 0.0, density: 1.0, loss: reference_loss, attained: false },
        };
        chosen[l] = block.threshold;
        blocks.push(block);
    }
    let name = if task == 0 { bundle.base_task.name.clone() } else { bundle.sub_tasks[task - 1].task.name.clone() };
    Ok(ThresholdChoice { task: name, reference_loss, blocks })
}

/// Mean per-frame toy loss of a task run densely.
pub fn dense_task_loss(bundle: &ModelBundle, data: &Dataset, task: usize) -> Result<f64> {
    let rt = Runtime::new(bundle)?;
    let parts = par::map_range(data.clips.len(), |c| -> Result<f64> {
        let clip = &data.clips[c];
        let mut loss = 0.0;
        for (t, f) in clip.frames.iter().enumerate() {
            let (pred, _) = rt.dense_forward(task, f)?;
            loss += mse(&pred, &clip.targets[task][t])?.0;
        }
        Ok(loss)
    });
    let total: f64 = parts.into_iter().collect::<Result<Vec<_>>>()?.iter().sum();
    let frames: usize = data.clips.iter().map(|c| c.frames.len()).sum();
    Ok(total / frames.max(1) as f64)
}
