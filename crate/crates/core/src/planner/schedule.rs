use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reuse::{FramePlan, ReuseMode};

pub const DEFAULT_KEYFRAME_PERIOD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every task dense on every frame.
    Dense,
    /// Sub-tasks reuse the base task on every layer; no temporal reuse.
    TaskOnly,
    /// Task reuse below each boundary, temporal reuse above it, with dense
    /// keyframes for the base.
    Combined,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dense => "dense",
            Strategy::TaskOnly => "task_only",
            Strategy::Combined => "combined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubTaskPlan {
    pub task: String,
    /// Layers `0..boundary` use task reuse on non-keyframes.
    pub boundary: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReusePlan {
    pub strategy: Strategy,
    pub keyframe_period: usize,
    pub layers: usize,
    pub sub_tasks: Vec<SubTaskPlan>,
}

impl ReusePlan {
    pub fn new(
        strategy: Strategy,
        keyframe_period: usize,
        layers: usize,
        sub_tasks: Vec<SubTaskPlan>,
    ) -> Result<Self> {
        let plan = Self { strategy, keyframe_period, layers, sub_tasks };
        plan.validate()?;
        Ok(plan)
    }

    /// Combined plan with unnamed sub-tasks `task1..`.
    pub fn combined(boundaries: &[usize], keyframe_period: usize, layers: usize) -> Result<Self> {
        let subs = boundaries
            .iter()
            .enumerate()
            .map(|(k, &b)| SubTaskPlan { task: format!("task{}", k + 1), boundary: b })
            .collect();
        Self::new(Strategy::Combined, keyframe_period, layers, subs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keyframe_period == 0 {
            return Err(Error::Schedule("keyframe period must be at least 1".into()));
        }
        if let Some(s) = self.sub_tasks.iter().find(|s| s.boundary > self.layers) {
            return Err(Error::Schedule(format!(
                "boundary {} for `{}` exceeds {} layers",
                s.boundary, s.task, self.layers
            )));
        }
        Ok(())
    }

    pub fn is_keyframe(&self, frame: u64) -> bool {
        frame.is_multiple_of(self.keyframe_period as u64)
    }

    /// Per-layer modes of task `t` (0 is the base).
    pub fn task_modes(&self, t: usize, keyframe: bool) -> Vec<ReuseMode> {
        let l = self.layers;
        match (self.strategy, t) {
            (Strategy::Dense, _) => vec![ReuseMode::Dense; l],
            (Strategy::TaskOnly, 0) => vec![ReuseMode::Dense; l],
            (Strategy::TaskOnly, _) => vec![ReuseMode::Task; l],
            (Strategy::Combined, 0) if keyframe => vec![ReuseMode::Dense; l],
            (Strategy::Combined, 0) => vec![ReuseMode::Temporal; l],
            (Strategy::Combined, _) if keyframe => vec![ReuseMode::Task; l],
            (Strategy::Combined, k) => {
                let b = self.sub_tasks[k - 1].boundary;
                (0..l)
                    .map(|i| if i < b { ReuseMode::Task } else { ReuseMode::Temporal })
                    .collect()
            }
        }
    }

    pub fn frame_plan(&self, frame: u64) -> FramePlan {
        let keyframe = self.is_keyframe(frame);
        FramePlan {
            frame,
            keyframe,
            base_modes: self.task_modes(0, keyframe),
            sub_modes: (1..=self.sub_tasks.len()).map(|k| self.task_modes(k, keyframe)).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Frame plans for frames `0..num_frames`.
pub fn build_schedule(plan: &ReusePlan, num_frames: u64) -> Result<Vec<FramePlan>> {
    plan.validate()?;
    Ok((0..num_frames).map(|f| plan.frame_plan(f)).collect())
}
