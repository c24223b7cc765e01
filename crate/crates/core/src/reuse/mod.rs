//! Activation reuse across tasks (sub-task borrows the base task's result for
//! the same frame) and across time (a task borrows its own previous frame).

mod cache;
mod density;
mod engine;
mod project;

pub use cache::{BaseActivationCache, FrameCaches, TemporalActivationCache};
pub use density::{measure_densities, DensityStats};
pub use engine::{
    run_frame, FramePlan, FrameResult, LayerCost, ReuseMode, Runtime, SiteRecord, TaskFrameResult,
};
pub use project::{add_sparse, task_reuse_project, temporal_reuse_project};
