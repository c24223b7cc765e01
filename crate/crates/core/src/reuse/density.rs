use serde::{Deserialize, Serialize};

use super::engine::{ReuseMode, Runtime, SiteRecord};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{threshold_q, DenseMatrix, Density};
use crate::transformer::ActivationTrace;

/// Per-layer densities of the delta weights (`s_w`), thresholded delta task
/// activations (`s_a1`) and thresholded delta temporal activations (`s_a2`),
/// averaged over projection sites and frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityStats {
    pub task: String,
    pub s_w: Vec<f64>,
    pub s_a1: Vec<f64>,
    pub s_a2: Vec<f64>,
}

impl DensityStats {
    pub fn layers(&self) -> usize {
        self.s_w.len()
    }

    /// Same density in every layer.
    pub fn uniform(task: &str, layers: usize, s_w: f64, s_a1: f64, s_a2: f64) -> Self {
        Self {
            task: task.to_string(),
            s_w: vec![s_w; layers],
            s_a1: vec![s_a1; layers],
            s_a2: vec![s_a2; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.s_w.len();
        if self.s_a1.len() != l || self.s_a2.len() != l {
            return Err(Error::InvalidArgument(format!(
                "density table for `{}` has ragged layers",
                self.task
            )));
        }
        let all = self.s_w.iter().chain(&self.s_a1).chain(&self.s_a2);
        if let Some(v) = all.into_iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("density {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Densities exactly as executed, from a run's site records. Task-mode
    /// sites feed `s_w`/`s_a1`, temporal-mode sites feed `s_a2`; layers
    /// without a site of that mode report 0.
    pub fn from_site_records(
        task: &str,
        layers: usize,
        tokens: usize,
        dim: usize,
        records: &[SiteRecord],
    ) -> Self {
        let w_size = (dim * dim) as f64;
        let a_size = (tokens * dim) as f64;
        let mut sums = vec![[0.0f64; 3]; layers];
        let mut counts = vec![[0usize; 2]; layers];
        for r in records {
            match r.mode {
                ReuseMode::Task => {
                    sums[r.layer][0] += r.delta_weight_nnz as f64 / w_size;
                    sums[r.layer][1] += r.delta_input_nnz as f64 / a_size;
                    counts[r.layer][0] += 1;
                }
                ReuseMode::Temporal => {
                    sums[r.layer][2] += r.delta_input_nnz as f64 / a_size;
                    counts[r.layer][1] += 1;
                }
                ReuseMode::Dense => {}
            }
        }
        let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Self {
            task: task.to_string(),
            s_w: (0..layers).map(|l| avg(sums[l][0], counts[l][0])).collect(),
            s_a1: (0..layers).map(|l| avg(sums[l][1], counts[l][0])).collect(),
            s_a2: (0..layers).map(|l| avg(sums[l][2], counts[l][1])).collect(),
        }
    }
}

fn thresholded_density(a: &DenseMatrix, b: &DenseMatrix, th: f64) -> Result<f64> {
    Ok(threshold_q(&a.sub(b)?, th)?.density())
}

/// Measures densities for every task (base first) over a frame sequence.
///
/// Activations come from exact dense forwards of each task. `s_a1` compares a
/// sub-task's site inputs with the base task's on the same frame, `s_a2` with
/// its own on the previous frame; both are thresholded at the task's per-block
/// threshold (the backbone thresholds for the base). The base task reports
/// `s_w = s_a1 = 0`.
// Index loops keep the task and temporal passes visibly parallel.
#[allow(clippy::needless_range_loop)]
pub fn measure_densities(rt: &Runtime<'_>, frames: &[DenseMatrix]) -> Result<Vec<DensityStats>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(
            "temporal densities need at least two frames".into(),
        ));
    }
    let bundle = rt.bundle();
    let cfg = &bundle.config;
    let tasks = rt.task_count();
    // traces[task][frame]
    let traces: Vec<Vec<ActivationTrace>> = par::map_range(tasks, |t| {
        frames
            .iter()
            .map(|f| rt.dense_forward(t, f).map(|(_, tr)| tr))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let sites = cfg.sites_per_block();
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let thresholds = if t == 0 {
            &cfg.thresholds
        } else {
            &bundle.sub_tasks[t - 1].thresholds
        };
        let mut stats = DensityStats::uniform(rt.task_name(t), cfg.layers, 0.0, 0.0, 0.0);
        for l in 0..cfg.layers {
            let th = thresholds[l];
            if t > 0 {
                let deltas = &bundle.sub_tasks[t - 1].deltas[l];
                stats.s_w[l] = deltas.iter().map(|d| d.density()).sum::<f64>() / sites as f64;
                let mut s = 0.0;
                for f in 0..frames.len() {
                    for site in 0..sites {
                        s += thresholded_density(
                            &traces[t][f].layers[l][site].input,
                            &traces[0][f].layers[l][site].input,
                            th,
                        )?;
                    }
                }
                stats.s_a1[l] = s / (frames.len() * sites) as f64;
            }
            let mut s = 0.0;
            for f in 1..frames.len() {
                for site in 0..sites {
                    s += thresholded_density(
                        &traces[t][f].layers[l][site].input,
                        &traces[t][f - 1].layers[l][site].input,
                        th,
                    )?;
                }
            }
            stats.s_a2[l] = s / ((frames.len() - 1) * sites) as f64;
        }
        out.push(stats);
    }
    Ok(out)
}
