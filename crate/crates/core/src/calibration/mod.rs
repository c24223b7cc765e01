//! Synthetic data and the staged delta-learning pipeline.
//!
//! Stage 0 trains the base task densely. Each sub-task then learns gated
//! deltas under an expected-L0 penalty (stage 1), has its sparsity pattern
//! fixed, fine-tunes the surviving values (stage 2) and fine-tunes again with
//! L1 penalties on task and temporal activation differences (stage 3).
//! Per-block thresholds come from a grid search on the executed reuse path.

pub mod backprop;
mod gate;
mod objective;
mod synth;
mod train;

pub use gate::{expected_l0, hard_concrete_sample, l1_penalty, l1_subgradient, sigmoid, HardConcreteGate};
pub use objective::{
    base_objective, base_site_inputs, l0_objective, masked_objective, ActivationTerms, BaseModel,
    FlatParams, GatedDeltas, MaskedDeltas, SiteInputs,
};
pub use synth::{
    decode_dataset, encode_dataset, generate_synth, load_dataset, save_dataset, Clip, Dataset,
    SynthTaskSpec, DATASET_MAGIC,
};
pub use train::{
    binarize_and_fix, dense_task_loss, init_base, reuse_loss_and_density, select_thresholds,
    stage1_train_l0, stage2_finetune, stage3_activation_sparsify, train_base, BlockThreshold,
    CalibConfig, Momentum, ThresholdChoice, TrainState,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par;
use crate::reuse::{measure_densities, DensityStats, Runtime};
use crate::store::{DeltaModel, ModelBundle, TaskId};

/// First and last loss of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub steps: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl StageSummary {
    fn from_history(h: &[f64]) -> Self {
        Self { steps: h.len(), initial_loss: h.first().copied(), final_loss: h.last().copied() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTaskReport {
    pub task: String,
    pub stage1: StageSummary,
    pub stage2: StageSummary,
    pub stage3: StageSummary,
    pub mean_expected_l0_initial: f64,
    pub mean_expected_l0_final: f64,
    /// `nnz / total` right after binarization.
    pub binarized_density: f64,
    pub delta_nnz: usize,
    pub delta_total: usize,
    pub dense_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: CalibConfig,
    pub dataset_seed: u64,
    pub base: StageSummary,
    pub base_dense_loss: f64,
    pub sub_tasks: Vec<SubTaskReport>,
    pub thresholds: Vec<ThresholdChoice>,
    /// Densities of the final bundle over the first clip, base first.
    pub densities: Option<Vec<DensityStats>>,
}

pub struct CalibrationOutcome {
    pub bundle: ModelBundle,
    pub report: CalibrationReport,
}

/// One sub-task through stages 1 to 3. The result has zero thresholds.
pub fn calibrate_sub_task(
    task: TaskId,
    base: &BaseModel,
    data: &Dataset,
    cfg: &CalibConfig,
) -> Result<(DeltaModel, SubTaskReport)> {
    let state = TrainState::new(task.clone(), base, cfg);
    let l0_initial = state.mean_expected_l0(&cfg.gate);
    let state = stage1_train_l0(&state, base, data, cfg)?;
    let model = binarize_and_fix(&state, &cfg.gate, cfg.threshold_prob)?;
    let delta_total: usize = state.params.deltas.iter().flatten().map(|m| m.len()).sum();
    let binarized_density = model.nnz() as f64 / delta_total.max(1) as f64;
    let (model, h2) = stage2_finetune(&model, base, data, cfg)?;
    let (model, h3) = stage3_activation_sparsify(&model, base, data, cfg)?;
    let report = SubTaskReport {
        task: task.name,
        stage1: StageSummary::from_history(&state.loss_history),
        stage2: StageSummary::from_history(&h2),
        stage3: StageSummary::from_history(&h3),
        mean_expected_l0_initial: l0_initial,
        mean_expected_l0_final: state.mean_expected_l0(&cfg.gate),
        binarized_density,
        delta_nnz: model.nnz(),
        delta_total,
        dense_loss: 0.0,
    };
    Ok((model, report))
}

/// Runs the whole pipeline and returns an `f32`-rounded bundle.
pub fn calibrate(data: &Dataset, cfg: &CalibConfig) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    data.spec.validate()?;
    let config = train::backbone_config(data, cfg);
    config.validate()?;
    let classes = data.spec.classes;

    let init = init_base(&config, classes, cfg);
    let (mut base, base_history) = train_base(&init, data, cfg)?;
    // The stored base is f32; sub-tasks train against exactly that.
    base.embedding.round_to_f32();
    for b in &mut base.blocks {
        b.round_to_f32();
    }
    base.head.round_to_f32();

    let subs = par::map_range(data.spec.tasks - 1, |k| {
        calibrate_sub_task(TaskId::new(format!("task{}", k + 1), k + 1), &base, data, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (models, mut sub_reports): (Vec<_>, Vec<_>) = subs.into_iter().unzip();

    let mut bundle = ModelBundle {
        config,
        embedding: base.embedding.clone(),
        base_task: TaskId::new("base", 0),
        base_weights: base.blocks.clone(),
        base_head: base.head.clone(),
        sub_tasks: models,
    };
    bundle.round_to_f32();
    bundle.validate()?;

    let choices = par::map_range(bundle.task_count(), |t| select_thresholds(&bundle, data, t, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    bundle.config.thresholds = choices[0].thresholds();
    for (sub, choice) in bundle.sub_tasks.iter_mut().zip(&choices[1..]) {
        sub.thresholds = choice.thresholds();
    }
    bundle.round_to_f32();

    let base_dense_loss = dense_task_loss(&bundle, data, 0)?;
    for (k, r) in sub_reports.iter_mut().enumerate() {
        r.dense_loss = dense_task_loss(&bundle, data, k + 1)?;
    }
    let densities = match data.clips.first() {
        Some(c) if c.frames.len() >= 2 => Some(measure_densities(&Runtime::new(&bundle)?, &c.frames)?),
        _ => None,
    };
    Ok(CalibrationOutcome {
        bundle,
        report: CalibrationReport {
            config: cfg.clone(),
            dataset_seed: data.spec.seed,
            base: StageSummary::from_history(&base_history),
            base_dense_loss,
            sub_tasks: sub_reports,
            thresholds: choices,
            densities,
        },
    })
}
