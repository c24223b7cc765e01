use serde::{Deserialize, Serialize};

use super::schedule::ReusePlan;
use crate::error::{Error, Result};
use crate::reuse::{DensityStats, ReuseMode};
use crate::transformer::BackboneConfig;

/// Estimated multiplies of a single projection site:
/// dense `P D^2`, task `(S_w + S_a1) P D^2`, temporal `S_a2 P D^2`.
pub fn projection_cost(
    mode: ReuseMode,
    s_w: f64,
    s_a1: f64,
    s_a2: f64,
    tokens: usize,
    dim: usize,
) -> f64 {
    let full = (tokens * dim * dim) as f64;
    match mode {
        ReuseMode::Dense => full,
        ReuseMode::Task => (s_w + s_a1) * full,
        ReuseMode::Temporal => s_a2 * full,
    }
}

/// Estimated projection multiplies of one layer, all `4h + 2` sites.
pub fn estimate_layer_cost(
    stats: &DensityStats,
    layer: usize,
    mode: ReuseMode,
    tokens: usize,
    dim: usize,
    heads: usize,
) -> Result<f64> {
    if layer >= stats.layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} not covered by density table of {} layers",
            stats.layers()
        )));
    }
    let sites = (4 * heads + 2) as f64;
    Ok(sites
        * projection_cost(
            mode,
            stats.s_w[layer],
            stats.s_a1[layer],
            stats.s_a2[layer],
            tokens,
            dim,
        ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub dense: f64,
    pub task: f64,
    pub temporal: f64,
}

impl LayerEstimate {
    pub fn get(&self, mode: ReuseMode) -> f64 {
        match mode {
            ReuseMode::Dense => self.dense,
            ReuseMode::Task => self.task,
            ReuseMode::Temporal => self.temporal,
        }
    }
}

/// Projection and attention multiplies for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCostEstimate {
    pub task: String,
    pub layers: Vec<LayerEstimate>,
    pub keyframe_modes: Vec<ReuseMode>,
    pub non_keyframe_modes: Vec<ReuseMode>,
    /// Projection multiplies on a keyframe.
    pub keyframe_projection: f64,
    /// Projection multiplies on a non-keyframe.
    pub non_keyframe_projection: f64,
    /// Attention multiplies per frame, always dense.
    pub attention: f64,
    /// Projection plus attention, averaged over one keyframe period.
    pub per_frame: f64,
    /// Dense single-task multiplies per frame.
    pub dense_baseline: f64,
    /// `100 * per_frame / dense_baseline`.
    pub percent_of_dense: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub keyframe_period: usize,
    pub tasks: Vec<TaskCostEstimate>,
    /// Sum over tasks of `per_frame`.
    pub per_frame: f64,
    /// Sum over tasks of `dense_baseline`.
    pub dense_baseline: f64,
    pub percent_of_dense: f64,
}

/// Applies the cost model to a plan. `stats` holds one table per task with
/// the base first.
pub fn report_costs(
    plan: &ReusePlan,
    stats: &[DensityStats],
    config: &BackboneConfig,
) -> Result<CostEstimate> {
    if stats.len() != plan.sub_tasks.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} density tables for {} tasks",
            stats.len(),
            plan.sub_tasks.len() + 1
        )));
    }
    let (p, d, h) = (config.tokens, config.dim, config.heads);
    let attention = (config.attention_macs() * config.layers as u64) as f64;
    let dense_baseline =
        (config.dense_block_macs() * config.layers as u64) as f64;
    let period = plan.keyframe_period as f64;
    let mut tasks = Vec::with_capacity(stats.len());
    for (t, s) in stats.iter().enumerate() {
        s.validate()?;
        if s.layers() != config.layers {
            return Err(Error::InvalidArgument(format!(
                "density table for `{}` has {} layers, config has {}",
                s.task,
                s.layers(),
                config.layers
            )));
        }
        let layers = (0..config.layers)
            .map(|l| -> Result<LayerEstimate> {
                Ok(LayerEstimate {
                    dense: estimate_layer_cost(s, l, ReuseMode::Dense, p, d, h)?,
                    task: estimate_layer_cost(s, l, ReuseMode::Task, p, d, h)?,
                    temporal: estimate_layer_cost(s, l, ReuseMode::Temporal, p, d, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let keyframe_modes = plan.task_modes(t, true);
        let non_keyframe_modes = plan.task_modes(t, false);
        let sum = |modes: &[ReuseMode]| -> f64 {
            modes.iter().zip(&layers).map(|(m, e)| e.get(*m)).sum()
        };
        let keyframe_projection = sum(&keyframe_modes);
        let non_keyframe_projection = sum(&non_keyframe_modes);
        let per_frame = (keyframe_projection + (period - 1.0) * non_keyframe_projection) / period
            + attention;
        tasks.push(TaskCostEstimate {
            task: s.task.clone(),
            layers,
            keyframe_modes,
            non_keyframe_modes,
            keyframe_projection,
            non_keyframe_projection,
            attention,
            per_frame,
            dense_baseline,
            percent_of_dense: 100.0 * per_frame / dense_baseline,
        });
    }
    let per_frame: f64 = tasks.iter().map(|t| t.per_frame).sum();
    let dense_total: f64 = tasks.iter().map(|t| t.dense_baseline).sum();
    Ok(CostEstimate {
        keyframe_period: plan.keyframe_period,
        tasks,
        per_frame,
        dense_baseline: dense_total,
        percent_of_dense: 100.0 * per_frame / dense_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_projection_example() {
        let c = projection_cost(ReuseMode::Task, 0.1, 0.2, 0.0, 4, 8);
        assert!((c - 76.8).abs() < 1e-12);
        let stats = DensityStats::uniform("x", 1, 0.1, 0.2, 0.0);
        let layer = estimate_layer_cost(&stats, 0, ReuseMode::Task, 4, 8, 1).unwrap();
        assert!((layer - 6.0 * 76.8).abs() < 1e-9);
        assert_eq!(estimate_layer_cost(&stats, 0, ReuseMode::Temporal, 4, 8, 1).unwrap(), 0.0);
        assert!(estimate_layer_cost(&stats, 1, ReuseMode::Task, 4, 8, 1).is_err());
    }

    #[test]
    fn full_density_task_equals_dense() {
        let stats = DensityStats::uniform("x", 2, 0.4, 0.6, 1.0);
        for l in 0..2 {
            let t = estimate_layer_cost(&stats, l, ReuseMode::Task, 5, 6, 2).unwrap();
            let d = estimate_layer_cost(&stats, l, ReuseMode::Dense, 5, 6, 2).unwrap();
            assert!((t - d).abs() < 1e-9);
        }
    }
}
