//! Forward-only vision-transformer backbone. Every linear projection goes
//! through a [`ProjectionExecutor`], which is where the reuse engine plugs in.

mod config;
mod forward;
mod weights;

pub use config::BackboneConfig;
pub use forward::{
    attention, backbone_forward, block_forward, embed, ffn, gelu, gelu_grad, head_forward,
    positional_table, softmax_rows, ActivationTrace, DenseExecutor, ProjectionExecutor,
    SiteActivation,
};
pub use weights::{BlockWeights, Site, TaskHead};
