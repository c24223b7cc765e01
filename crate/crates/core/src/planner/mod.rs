//! Cost model, reuse boundary selection and per-frame schedules.

mod boundary;
mod cost;
mod schedule;

pub use boundary::{
    greedy_modes, relative_costs, select_boundary, select_boundary_from_costs, split_cost,
};
pub use cost::{
    estimate_layer_cost, projection_cost, report_costs, CostEstimate, LayerEstimate,
    TaskCostEstimate,
};
pub use schedule::{build_schedule, ReusePlan, Strategy, SubTaskPlan, DEFAULT_KEYFRAME_PERIOD};

use crate::error::Result;
use crate::reuse::DensityStats;

/// Combined plan whose boundaries are chosen per sub-task. `stats[0]` is the
/// base task's table and is not used for a boundary.
pub fn plan_from_densities(stats: &[DensityStats], keyframe_period: usize) -> Result<ReusePlan> {
    let layers = stats.first().map_or(0, |s| s.layers());
    let subs = stats
        .iter()
        .skip(1)
        .map(|s| Ok(SubTaskPlan { task: s.task.clone(), boundary: select_boundary(s)? }))
        .collect::<Result<Vec<_>>>()?;
    ReusePlan::new(Strategy::Combined, keyframe_period, layers, subs)
}
