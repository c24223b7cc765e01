use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone dimensions plus the base task's per-block temporal thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
    /// Width of the raw per-token input the patchifier maps to `dim`.
    pub patch_dim: usize,
    /// Per-block threshold used when the base task reuses the previous frame.
    pub thresholds: Vec<f64>,
    /// Row normalization after each block. Off by default; the reuse algebra
    /// is exact only without it.
    #[serde(default)]
    pub post_norm: bool,
}

impl BackboneConfig {
    pub fn new(layers: usize, dim: usize, heads: usize, tokens: usize, patch_dim: usize) -> Self {
        Self {
            layers,
            dim,
            heads,
            tokens,
            patch_dim,
            thresholds: vec![0.0; layers],
            post_norm: false,
        }
    }

    pub fn sites_per_block(&self) -> usize {
        4 * self.heads + 2
    }

    /// Multiplies of one dense projection: `P * D^2`.
    pub fn projection_macs(&self) -> u64 {
        (self.tokens * self.dim * self.dim) as u64
    }

    /// Multiplies of all attention score and mixing products in one block:
    /// `2 * h * P^2 * D`.
    pub fn attention_macs(&self) -> u64 {
        (2 * self.heads * self.tokens * self.tokens * self.dim) as u64
    }

    /// Dense multiplies for one block.
    pub fn dense_block_macs(&self) -> u64 {
        self.sites_per_block() as u64 * self.projection_macs() + self.attention_macs()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.tokens == 0 || self.patch_dim == 0 {
            return Err(Error::Config(
                "dim, heads, tokens and patch_dim must be positive".into(),
            ));
        }
        if self.thresholds.len() != self.layers {
            return Err(Error::Config(format!(
                "{} thresholds for {} layers",
                self.thresholds.len(),
                self.layers
            )));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Config(format!("invalid threshold {t}")));
        }
        Ok(())
    }
}
