//! Multi-task transformer inference that shares base-task weights and
//! activations with sub-tasks through sparse deltas, and shares a task's own
//! activations across consecutive video frames.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense and CSR matrices with multiply-counting kernels.
//! - [`transformer`]: the backbone with pluggable projection executors.
//! - [`store`]: base weights, sparse per-task deltas, the bundle file format.
//! - [`reuse`]: task-domain and temporal-domain activation reuse.
//! - [`planner`]: cost model, reuse boundary selection and frame schedules.
//! - [`calibration`]: synthetic data and the staged delta-learning pipeline.
//! - [`evaluate`]: runs a plan over dataset clips and assembles a report.

pub mod calibration;
pub mod error;
pub mod evaluate;
pub mod par;
pub mod planner;
pub mod reuse;
pub mod store;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
