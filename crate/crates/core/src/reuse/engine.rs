use serde::{Deserialize, Serialize};

use super::cache::{BaseActivationCache, FrameCaches, TemporalActivationCache};
use super::project::{task_reuse_project, temporal_reuse_project};
use crate::error::{Error, Result};
use crate::par;
use crate::store::{DeltaModel, ModelBundle};
use crate::tensor::{dense_matmul, threshold_q, CsrMatrix, DenseMatrix, OpCounter};
use crate::transformer::{
    backbone_forward, embed, head_forward, ActivationTrace, BlockWeights, ProjectionExecutor, Site,
    SiteActivation,
};

/// How a layer's projections are computed for one task on one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseMode {
    Dense,
    /// Borrow the base task's activations for the same frame.
    Task,
    /// Borrow this task's activations from the previous frame.
    Temporal,
}

impl ReuseMode {
    pub const ALL: [ReuseMode; 3] = [ReuseMode::Dense, ReuseMode::Task, ReuseMode::Temporal];

    pub fn as_str(self) -> &'static str {
        match self {
            ReuseMode::Dense => "dense",
            ReuseMode::Task => "task",
            ReuseMode::Temporal => "temporal",
        }
    }
}

/// Per-layer modes for every task on one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame: u64,
    pub keyframe: bool,
    pub base_modes: Vec<ReuseMode>,
    /// `sub_modes[k]` belongs to sub-task `k + 1`.
    pub sub_modes: Vec<Vec<ReuseMode>>,
}

impl FramePlan {
    /// Every task dense on every layer.
    pub fn dense(frame: u64, layers: usize, sub_tasks: usize) -> Self {
        Self {
            frame,
            keyframe: true,
            base_modes: vec![ReuseMode::Dense; layers],
            sub_modes: vec![vec![ReuseMode::Dense; layers]; sub_tasks],
        }
    }

    fn validate(&self, layers: usize, sub_tasks: usize) -> Result<()> {
        if self.base_modes.len() != layers || self.sub_modes.iter().any(|m| m.len() != layers) {
            return Err(Error::Schedule(format!(
                "frame {} plan does not cover {layers} layers",
                self.frame
            )));
        }
        if self.sub_modes.len() != sub_tasks {
            return Err(Error::Schedule(format!(
                "frame {} plan has modes for {} sub-tasks, bundle has {sub_tasks}",
                self.frame,
                self.sub_modes.len()
            )));
        }
        if self.base_modes.contains(&ReuseMode::Task) {
            return Err(Error::Schedule("the base task cannot use task-domain reuse".into()));
        }
        Ok(())
    }
}

/// What one projection site cost and how it ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub layer: usize,
    pub site: usize,
    /// Mode actually executed (after any fallback).
    pub mode: ReuseMode,
    pub fallback: bool,
    pub multiplies: u64,
    /// `nnz(dW)` in task mode, otherwise 0.
    pub delta_weight_nnz: usize,
    /// `nnz(dX)` in task mode, `nnz(DX)` in temporal mode, `P * D` when dense.
    pub delta_input_nnz: usize,
}

/// Projection cost of one layer split by the mode that produced it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub dense: OpCounter,
    pub task: OpCounter,
    pub temporal: OpCounter,
}

impl LayerCost {
    pub fn get(&self, mode: ReuseMode) -> OpCounter {
        match mode {
            ReuseMode::Dense => self.dense,
            ReuseMode::Task => self.task,
            ReuseMode::Temporal => self.temporal,
        }
    }

    fn get_mut(&mut self, mode: ReuseMode) -> &mut OpCounter {
        match mode {
            ReuseMode::Dense => &mut self.dense,
            ReuseMode::Task => &mut self.task,
            ReuseMode::Temporal => &mut self.temporal,
        }
    }

    pub fn total(&self) -> OpCounter {
        self.dense + self.task + self.temporal
    }
}

#[derive(Clone, Debug)]
pub struct TaskFrameResult {
    pub task: String,
    pub predictions: DenseMatrix,
    pub features: DenseMatrix,
    /// Projections plus attention.
    pub total: OpCounter,
    pub attention: OpCounter,
    pub layers: Vec<LayerCost>,
    pub sites: Vec<SiteRecord>,
    pub fallbacks: usize,
}

impl TaskFrameResult {
    pub fn projection(&self) -> OpCounter {
        self.layers.iter().map(LayerCost::total).fold(OpCounter::new(), |a, b| a + b)
    }
}

#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame: u64,
    pub keyframe: bool,
    /// Patchifier cost, shared by all tasks.
    pub embedding: OpCounter,
    /// Base first, then sub-tasks in bundle order.
    pub tasks: Vec<TaskFrameResult>,
}

/// A bundle with every sub-task's `W + dW` materialized.
pub struct Runtime<'a> {
    bundle: &'a ModelBundle,
    effective: Vec<Vec<BlockWeights>>,
}

impl<'a> Runtime<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        bundle.validate()?;
        let effective = bundle
            .sub_tasks
            .iter()
            .map(|s| s.effective_weights(&bundle.base_weights))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bundle, effective })
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    /// Weights task `task` actually runs with (0 is the base).
    pub fn weights(&self, task: usize) -> &[BlockWeights] {
        if task == 0 {
            &self.bundle.base_weights
        } else {
            &self.effective[task - 1]
        }
    }

    pub fn head(&self, task: usize) -> &crate::transformer::TaskHead {
        if task == 0 {
            &self.bundle.base_head
        } else {
            &self.bundle.sub_tasks[task - 1].head
        }
    }

    pub fn task_name(&self, task: usize) -> &str {
        if task == 0 {
            &self.bundle.base_task.name
        } else {
            &self.bundle.sub_tasks[task - 1].task.name
        }
    }

    pub fn task_count(&self) -> usize {
        self.bundle.task_count()
    }

    pub fn embed(&self, patches: &DenseMatrix, counter: &mut OpCounter) -> Result<DenseMatrix> {
        let cfg = &self.bundle.config;
        if patches.shape() != (cfg.tokens, cfg.patch_dim) {
            return Err(Error::shape("frame patches", patches.shape(), (cfg.tokens, cfg.patch_dim)));
        }
        embed(patches, &self.bundle.embedding, counter)
    }

    /// Independent dense forward of one task, no caches involved.
    pub fn dense_forward(&self, task: usize, patches: &DenseMatrix) -> Result<(DenseMatrix, ActivationTrace)> {
        let mut c = OpCounter::new();
        let tokens = self.embed(patches, &mut c)?;
        let (features, trace) = backbone_forward(
            &tokens,
            &self.bundle.config,
            self.weights(task),
            &mut crate::transformer::DenseExecutor,
            &mut c,
        )?;
        Ok((head_forward(&features, self.head(task))?, trace))
    }
}

struct ReuseExecutor<'a> {
    modes: &'a [ReuseMode],
    thresholds: &'a [f64],
    heads: usize,
    base: Option<&'a BaseActivationCache>,
    deltas: Option<&'a DeltaModel>,
    prev: &'a TemporalActivationCache,
    records: Vec<Vec<Option<SiteActivation>>>,
    sites: Vec<SiteRecord>,
    layers: Vec<LayerCost>,
}

/// The input this site effectively consumed: `reference` with every entry
/// that survived thresholding replaced by the actual input. Equal to
/// `reference + delta` but exact in floating point, so an unchanged input
/// differences to exactly zero on the next frame. Not charged.
fn splice(reference: &DenseMatrix, delta: &CsrMatrix, actual: &DenseMatrix) -> DenseMatrix {
    let mut out = reference.clone();
    for (r, c, _) in delta.iter() {
        out.set(r, c, actual.get(r, c));
    }
    out
}

struct SiteOutcome {
    output: DenseMatrix,
    reconstructed_input: DenseMatrix,
    delta_weight_nnz: usize,
    delta_input_nnz: usize,
}

impl<'a> ReuseExecutor<'a> {
    fn new(
        layers: usize,
        heads: usize,
        modes: &'a [ReuseMode],
        thresholds: &'a [f64],
        base: Option<&'a BaseActivationCache>,
        deltas: Option<&'a DeltaModel>,
        prev: &'a TemporalActivationCache,
    ) -> Self {
        Self {
            modes,
            thresholds,
            heads,
            base,
            deltas,
            prev,
            records: vec![vec![None; Site::count(heads)]; layers],
            sites: Vec::new(),
            layers: vec![LayerCost::default(); layers],
        }
    }

    fn unavailable(layer: usize, site: Site, reason: &'static str) -> Error {
        Error::ReuseUnavailable {
            layer,
            site,
            reason,
        }
    }

    fn task_site(
        &self,
        layer: usize,
        site: Site,
        input: &DenseMatrix,
        weight: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<SiteOutcome> {
        let idx = site.index(self.heads);
        let base = self
            .base
            .and_then(|b| b.entry(layer, idx))
            .ok_or_else(|| Self::unavailable(layer, site, "no base activation cached"))?;
        let deltas = self
            .deltas
            .ok_or_else(|| Self::unavailable(layer, site, "task has no delta weights"))?;
        let th = self.thresholds[layer];
        let delta_w = &deltas.deltas[layer][idx];
        let delta_in = threshold_q(&input.sub(&base.input)?, th)?;
        let (output, _) = task_reuse_project(base, &delta_in, weight, delta_w, th, counter)?;
        let reconstructed_input = splice(&base.input, &delta_in, input);
        Ok(SiteOutcome {
            output,
            reconstructed_input,
            delta_weight_nnz: delta_w.nnz(),
            delta_input_nnz: delta_in.nnz(),
        })
    }

    fn temporal_site(
        &self,
        layer: usize,
        site: Site,
        input: &DenseMatrix,
        weight: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<SiteOutcome> {
        let prev = self
            .prev
            .entry(layer, site.index(self.heads))
            .ok_or_else(|| Self::unavailable(layer, site, "no previous frame cached"))?;
        let (output, delta) =
            temporal_reuse_project(prev, input, weight, self.thresholds[layer], counter)?;
        let reconstructed_input = splice(&prev.input, &delta, input);
        Ok(SiteOutcome {
            output,
            reconstructed_input,
            delta_weight_nnz: 0,
            delta_input_nnz: delta.nnz(),
        })
    }

    fn into_trace(self) -> (ActivationTrace, Vec<SiteRecord>, Vec<LayerCost>) {
        let trace = ActivationTrace {
            layers: self
                .records
                .into_iter()
                .map(|l| l.into_iter().map(|s| s.expect("every site ran")).collect())
                .collect(),
        };
        (trace, self.sites, self.layers)
    }
}

impl ProjectionExecutor for ReuseExecutor<'_> {
    fn project(
        &mut self,
        layer: usize,
        site: Site,
        input: &DenseMatrix,
        weight: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<DenseMatrix> {
        let requested = self.modes[layer];
        let mut local = OpCounter::new();
        let attempt = match requested {
            ReuseMode::Dense => None,
            ReuseMode::Task => Some(self.task_site(layer, site, input, weight, &mut local)),
            ReuseMode::Temporal => Some(self.temporal_site(layer, site, input, weight, &mut local)),
        };
        let (mode, fallback, outcome) = match attempt {
            Some(Ok(o)) => (requested, false, o),
            Some(Err(Error::ReuseUnavailable { .. })) | None => {
                local = OpCounter::new();
                let output = dense_matmul(input, weight, &mut local)?;
                let o = SiteOutcome {
                    output,
                    reconstructed_input: input.clone(),
                    delta_weight_nnz: 0,
                    delta_input_nnz: input.len(),
                };
                (ReuseMode::Dense, requested != ReuseMode::Dense, o)
            }
            Some(Err(e)) => return Err(e),
        };
        *counter += local;
        *self.layers[layer].get_mut(mode) += local;
        let idx = site.index(self.heads);
        self.sites.push(SiteRecord {
            layer,
            site: idx,
            mode,
            fallback,
            multiplies: local.multiplies,
            delta_weight_nnz: outcome.delta_weight_nnz,
            delta_input_nnz: outcome.delta_input_nnz,
        });
        self.records[layer][idx] = Some(SiteActivation {
            input: outcome.reconstructed_input,
            output: outcome.output.clone(),
        });
        Ok(outcome.output)
    }
}

fn run_task(
    rt: &Runtime<'_>,
    task: usize,
    modes: &[ReuseMode],
    tokens: &DenseMatrix,
    base: Option<&BaseActivationCache>,
    prev: &TemporalActivationCache,
) -> Result<(TaskFrameResult, ActivationTrace)> {
    let cfg = &rt.bundle.config;
    let (thresholds, deltas) = if task == 0 {
        (&cfg.thresholds, None)
    } else {
        let d = &rt.bundle.sub_tasks[task - 1];
        (&d.thresholds, Some(d))
    };
    let mut exec = ReuseExecutor::new(cfg.layers, cfg.heads, modes, thresholds, base, deltas, prev);
    let mut total = OpCounter::new();
    let (features, _) = backbone_forward(tokens, cfg, rt.weights(task), &mut exec, &mut total)?;
    let predictions = head_forward(&features, rt.head(task))?;
    let (trace, sites, layers) = exec.into_trace();
    let projection = layers.iter().map(LayerCost::total).fold(OpCounter::new(), |a, b| a + b);
    let fallbacks = sites.iter().filter(|s| s.fallback).count();
    Ok((
        TaskFrameResult {
            task: rt.task_name(task).to_string(),
            predictions,
            features,
            total,
            attention: total - projection,
            layers,
            sites,
            fallbacks,
        },
        trace,
    ))
}

/// Runs every task on one frame.
///
/// The base task goes first and fills the base cache; sub-tasks then run
/// concurrently against it, each touching only its own temporal cache. All
/// caches are replaced only after every task succeeded.
pub fn run_frame(
    rt: &Runtime<'_>,
    plan: &FramePlan,
    patches: &DenseMatrix,
    caches: &mut FrameCaches,
) -> Result<FrameResult> {
    let cfg = &rt.bundle.config;
    plan.validate(cfg.layers, rt.bundle.sub_tasks.len())?;
    if caches.temporal.len() != rt.task_count() {
        return Err(Error::Schedule(format!(
            "caches sized for {} tasks, bundle has {}",
            caches.temporal.len(),
            rt.task_count()
        )));
    }
    if let Some(last) = caches.last_frame {
        if plan.frame <= last {
            return Err(Error::Schedule(format!(
                "frame {} arrives after frame {last}",
                plan.frame
            )));
        }
    }
    let mut embedding = OpCounter::new();
    let tokens = rt.embed(patches, &mut embedding)?;

    let (base_result, base_trace) =
        run_task(rt, 0, &plan.base_modes, &tokens, None, &caches.temporal[0])?;
    let base_cache = BaseActivationCache::new(plan.frame, base_trace);

    let temporal = &caches.temporal;
    let subs = par::map_range(rt.bundle.sub_tasks.len(), |k| {
        run_task(rt, k + 1, &plan.sub_modes[k], &tokens, Some(&base_cache), &temporal[k + 1])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut tasks = Vec::with_capacity(rt.task_count());
    tasks.push(base_result);
    caches.temporal[0].replace(plan.frame, base_cache.trace().clone());
    for (k, (result, trace)) in subs.into_iter().enumerate() {
        caches.temporal[k + 1].replace(plan.frame, trace);
        tasks.push(result);
    }
    caches.base = Some(base_cache);
    caches.last_frame = Some(plan.frame);
    Ok(FrameResult {
        frame: plan.frame,
        keyframe: plan.keyframe,
        embedding,
        tasks,
    })
}
