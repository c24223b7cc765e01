//! Base weights, sparse per-task deltas and the `DLTSHR01` bundle format.

mod bundle;
pub mod format;
mod random;

pub use bundle::{
    csr_bytes, dense_bytes, head_bytes, memory_bytes, param_counts, reparameterize, DeltaModel,
    ModelBundle, TaskAccount, TaskId,
};
pub use format::{decode_bundle, encode_bundle, load_bundle, save_bundle};
pub use random::random_bundle;
