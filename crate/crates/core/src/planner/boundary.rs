use crate::error::{Error, Result};
use crate::reuse::{DensityStats, ReuseMode};

/// Cost of running layers `0..boundary` in task mode and the rest temporal.
pub fn split_cost(task: &[f64], temporal: &[f64], boundary: usize) -> f64 {
    let head: f64 = task[..boundary].iter().sum();
    let tail: f64 = temporal[boundary..].iter().sum();
    head + tail
}

/// Prefix split `b` in `0..=L` minimizing [`split_cost`]. Ties go to the
/// smaller `b`.
pub fn select_boundary_from_costs(task: &[f64], temporal: &[f64]) -> Result<usize> {
    if task.len() != temporal.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task costs vs {} temporal costs",
            task.len(),
            temporal.len()
        )));
    }
    if let Some(v) = task.iter().chain(temporal).find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite layer cost {v}")));
    }
    let mut best = 0;
    let mut best_cost = split_cost(task, temporal, 0);
    for b in 1..=task.len() {
        let c = split_cost(task, temporal, b);
        if c < best_cost {
            best = b;
            best_cost = c;
        }
    }
    Ok(best)
}

/// Per-layer relative costs `(S_w + S_a1, S_a2)`. The common `(4h+2) P D^2`
/// factor does not change the argmin.
pub fn relative_costs(stats: &DensityStats) -> (Vec<f64>, Vec<f64>) {
    let task = stats.s_w.iter().zip(&stats.s_a1).map(|(w, a)| w + a).collect();
    (task, stats.s_a2.clone())
}

/// Reuse boundary for one sub-task from its density table.
pub fn select_boundary(stats: &DensityStats) -> Result<usize> {
    stats.validate()?;
    let (task, temporal) = relative_costs(stats);
    select_boundary_from_costs(&task, &temporal)
}

/// Cheaper mode chosen independently per layer, ties to task mode. Not
/// restricted to a prefix split, so it lower-bounds [`select_boundary`].
pub fn greedy_modes(stats: &DensityStats) -> Vec<ReuseMode> {
    let (task, temporal) = relative_costs(stats);
    task.iter()
        .zip(&temporal)
        .map(|(a, b)| if a <= b { ReuseMode::Task } else { ReuseMode::Temporal })
        .collect()
}
