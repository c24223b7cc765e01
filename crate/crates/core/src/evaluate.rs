//! Runs a reuse plan over dataset clips and assembles the run report.

use serde::{Deserialize, Serialize};

use crate::calibration::backprop::mse;
use crate::calibration::Dataset;
use crate::error::{Error, Result};
use crate::planner::{ReusePlan, SubTaskPlan};
use crate::reuse::{run_frame, DensityStats, FrameCaches, LayerCost, Runtime, SiteRecord};
use crate::store::{memory_bytes, param_counts, TaskAccount};
use crate::tensor::OpCounter;

/// A percentage that always travels with its raw counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
    pub percent: f64,
}

impl Ratio {
    pub fn new(numerator: u64, denominator: u64) -> Self {
        let percent = if denominator == 0 {
            0.0
        } else {
            100.0 * numerator as f64 / denominator as f64
        };
        Self { numerator, denominator, percent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub dense: OpCounter,
    pub task: OpCounter,
    pub temporal: OpCounter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub frames: u64,
    pub mean_loss: f64,
    /// Largest elementwise gap between reuse and dense predictions.
    pub max_dense_deviation: f64,
    pub layers: Vec<LayerFlops>,
    pub projection: OpCounter,
    pub attention: OpCounter,
    /// `projection + attention`.
    pub total: OpCounter,
    /// Multiplies of a dense run of the same frames.
    pub dense_multiplies: u64,
    pub multiplies_vs_dense: Ratio,
    pub fallbacks: u64,
    /// Densities as executed, from every site record of the run.
    pub densities: DensityStats,
}

/// Totals for frames at one distance from the preceding keyframe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetReport {
    pub offset: u64,
    /// Task-frames at this offset.
    pub task_frames: u64,
    pub multiplies: u64,
    pub dense_multiplies: u64,
    pub multiplies_vs_dense: Ratio,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub params: Vec<TaskAccount>,
    pub memory_bytes: Vec<TaskAccount>,
    /// Shared bundle vs one dense model per task.
    pub params_vs_separate: Ratio,
    pub memory_vs_separate: Ratio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Resolved inputs of the run, free-form.
    pub run: serde_json::Value,
    pub plan: ReusePlan,
    pub boundaries: Vec<SubTaskPlan>,
    pub clips: u64,
    pub frames_per_clip: u64,
    pub tasks: Vec<TaskReport>,
    /// Patchifier cost, once per frame for all tasks.
    pub embedding: OpCounter,
    pub total_multiplies: u64,
    pub total_dense_multiplies: u64,
    pub multiplies_vs_dense: Ratio,
    pub offsets: Vec<OffsetReport>,
    /// Mean over offsets of each offset's percentage.
    pub offset_average_percent: f64,
    pub storage: StorageReport,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(format!("report: {e}")))?;
        if report.tasks.is_empty() {
            return Err(Error::Corrupt("report has no tasks".into()));
        }
        Ok(report)
    }
}

fn storage(rt: &Runtime<'_>) -> StorageReport {
    let bundle = rt.bundle();
    let params = param_counts(bundle);
    let memory = memory_bytes(bundle);
    let tasks = bundle.task_count() as u64;
    let sum = |v: &[TaskAccount]| v.iter().map(|a| a.value).sum::<u64>();
    // A separate dense model per task stores the base block sizes plus its own head.
    let block_params = params[0].value - bundle.base_head.param_count() as u64;
    let head_params: u64 = (0..bundle.task_count()).map(|t| rt.head(t).param_count() as u64).sum();
    let separate_params = tasks * block_params + head_params;
    let block_bytes = memory[0].value - crate::store::head_bytes(&bundle.base_head) as u64;
    let head_bytes: u64 =
        (0..bundle.task_count()).map(|t| crate::store::head_bytes(rt.head(t)) as u64).sum();
    let separate_bytes = tasks * block_bytes + head_bytes;
    StorageReport {
        params_vs_separate: Ratio::new(sum(&params), separate_params),
        memory_vs_separate: Ratio::new(sum(&memory), separate_bytes),
        params,
        memory_bytes: memory,
    }
}

struct TaskTally {
    loss: f64,
    frames: u64,
    deviation: f64,
    layers: Vec<LayerCost>,
    attention: OpCounter,
    fallbacks: u64,
    records: Vec<SiteRecord>,
}

/// Executes `plan` on every clip, each clip starting from empty caches at
/// frame 0, and compares every prediction with a dense forward.
pub fn evaluate(
    rt: &Runtime<'_>,
    plan: &ReusePlan,
    data: &Dataset,
    run: serde_json::Value,
) -> Result<Report> {
    let bundle = rt.bundle();
    let cfg = &bundle.config;
    let tasks = rt.task_count();
    plan.validate()?;
    if plan.layers != cfg.layers || plan.sub_tasks.len() != bundle.sub_tasks.len() {
        return Err(Error::Schedule(format!(
            "plan covers {} layers and {} sub-tasks, bundle has {} and {}",
            plan.layers,
            plan.sub_tasks.len(),
            cfg.layers,
            bundle.sub_tasks.len()
        )));
    }
    if data.spec.tasks < tasks {
        return Err(Error::Config(format!(
            "dataset has targets for {} tasks, bundle has {tasks}",
            data.spec.tasks
        )));
    }
    if (data.spec.tokens, data.spec.patch_dim) != (cfg.tokens, cfg.patch_dim) {
        return Err(Error::Config(format!(
            "dataset frames are {}x{}, bundle expects {}x{}",
            data.spec.tokens, data.spec.patch_dim, cfg.tokens, cfg.patch_dim
        )));
    }
    let period = plan.keyframe_period as u64;
    let dense_per_frame = cfg.dense_block_macs() * cfg.layers as u64;

    let mut tallies: Vec<TaskTally> = (0..tasks)
        .map(|_| TaskTally {
            loss: 0.0,
            frames: 0,
            deviation: 0.0,
            layers: vec![LayerCost::default(); cfg.layers],
            attention: OpCounter::new(),
            fallbacks: 0,
            records: Vec::new(),
        })
        .collect();
    let mut offsets: Vec<(u64, u64, f64)> = vec![(0, 0, 0.0); period as usize];
    let mut embedding = OpCounter::new();

    for clip in &data.clips {
        let mut caches = FrameCaches::new(tasks);
        for (t, frame) in clip.frames.iter().enumerate() {
            let result = run_frame(rt, &plan.frame_plan(t as u64), frame, &mut caches)?;
            embedding += result.embedding;
            let slot = &mut offsets[(t as u64 % period) as usize];
            for (k, r) in result.tasks.iter().enumerate() {
                let (loss, _) = mse(&r.predictions, &clip.targets[k][t])?;
                let (dense, _) = rt.dense_forward(k, frame)?;
                let tally = &mut tallies[k];
                tally.loss += loss;
                tally.frames += 1;
                tally.deviation = tally.deviation.max(r.predictions.max_abs_diff(&dense));
                for (acc, l) in tally.layers.iter_mut().zip(&r.layers) {
                    acc.dense += l.dense;
                    acc.task += l.task;
                    acc.temporal += l.temporal;
                }
                tally.attention += r.attention;
                tally.fallbacks += r.fallbacks as u64;
                tally.records.extend(r.sites.iter().cloned());
                slot.0 += 1;
                slot.1 += r.total.multiplies;
                slot.2 += loss;
            }
        }
    }

    let task_reports: Vec<TaskReport> = tallies
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let projection = t.layers.iter().map(LayerCost::total).fold(OpCounter::new(), |a, b| a + b);
            let total = projection + t.attention;
            let dense_multiplies = dense_per_frame * t.frames;
            TaskReport {
                task: rt.task_name(k).to_string(),
                frames: t.frames,
                mean_loss: t.loss / t.frames.max(1) as f64,
                max_dense_deviation: t.deviation,
                layers: t
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, c)| LayerFlops { layer: l, dense: c.dense, task: c.task, temporal: c.temporal })
                    .collect(),
                projection,
                attention: t.attention,
                total,
                dense_multiplies,
                multiplies_vs_dense: Ratio::new(total.multiplies, dense_multiplies),
                fallbacks: t.fallbacks,
                densities: DensityStats::from_site_records(
                    rt.task_name(k),
                    cfg.layers,
                    cfg.tokens,
                    cfg.dim,
                    &t.records,
                ),
            }
        })
        .collect();

    let offsets: Vec<OffsetReport> = offsets
        .into_iter()
        .enumerate()
        .filter(|(_, o)| o.0 > 0)
        .map(|(i, (n, m, loss))| OffsetReport {
            offset: i as u64,
            task_frames: n,
            multiplies: m,
            dense_multiplies: n * dense_per_frame,
            multiplies_vs_dense: Ratio::new(m, n * dense_per_frame),
            mean_loss: loss / n as f64,
        })
        .collect();
    let offset_average_percent = if offsets.is_empty() {
        0.0
    } else {
        offsets.iter().map(|o| o.multiplies_vs_dense.percent).sum::<f64>() / offsets.len() as f64
    };
    let total_multiplies: u64 = task_reports.iter().map(|t| t.total.multiplies).sum();
    let total_dense: u64 = task_reports.iter().map(|t| t.dense_multiplies).sum();
    Ok(Report {
        run,
        plan: plan.clone(),
        boundaries: plan.sub_tasks.clone(),
        clips: data.clips.len() as u64,
        frames_per_clip: data.spec.frames as u64,
        tasks: task_reports,
        embedding,
        total_multiplies,
        total_dense_multiplies: total_dense,
        multiplies_vs_dense: Ratio::new(total_multiplies, total_dense),
        offsets,
        offset_average_percent,
        storage: storage(rt),
    })
}

