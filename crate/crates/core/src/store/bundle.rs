use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, DenseMatrix};
use crate::transformer::{BackboneConfig, BlockWeights, Site, TaskHead};

/// Task name plus its position in the bundle; index 0 is the base task.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskId {
    pub name: String,
    pub index: usize,
}

impl TaskId {
    pub fn new(name: impl Into<String>, index: usize) -> Self {
        Self {
            name: name.into(),
            index,
        }
    }

    pub fn is_base(&self) -> bool {
        self.index == 0
    }
}

/// A sub-task: sparse per-site weight deltas on top of the base, per-block
/// thresholds and its own dense head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaModel {
    pub task: TaskId,
    /// `deltas[layer][site_index]`, each `D x D`.
    pub deltas: Vec<Vec<CsrMatrix>>,
    pub thresholds: Vec<f64>,
    pub head: TaskHead,
}

impl DeltaModel {
    /// All-zero deltas with zero thresholds.
    pub fn empty(task: TaskId, config: &BackboneConfig, head: TaskHead) -> Self {
        let d = config.dim;
        Self {
            task,
            deltas: (0..config.layers)
                .map(|_| (0..config.sites_per_block()).map(|_| CsrMatrix::empty(d, d)).collect())
                .collect(),
            thresholds: vec![0.0; config.layers],
            head,
        }
    }

    pub fn delta(&self, layer: usize, site: Site, heads: usize) -> &CsrMatrix {
        &self.deltas[layer][site.index(heads)]
    }

    pub fn nnz(&self) -> usize {
        self.deltas.iter().flatten().map(CsrMatrix::nnz).sum()
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        if self.deltas.len() != config.layers {
            return Err(Error::Config(format!(
                "task `{}` has deltas for {} layers, expected {}",
                self.task.name,
                self.deltas.len(),
                config.layers
            )));
        }
        for (l, layer) in self.deltas.iter().enumerate() {
            if layer.len() != config.sites_per_block() {
                return Err(Error::Config(format!(
                    "task `{}` layer {l} has {} deltas, expected {}",
                    self.task.name,
                    layer.len(),
                    config.sites_per_block()
                )));
            }
            for (s, delta) in layer.iter().enumerate() {
                let name = format!(
                    "{}/layer{l}/{}",
                    self.task.name,
                    Site::from_index(s, config.heads)
                );
                if delta.shape() != (config.dim, config.dim) {
                    return Err(Error::shape("delta weight", delta.shape(), (config.dim, config.dim)));
                }
                delta.validate(&name)?;
            }
        }
        if self.thresholds.len() != config.layers {
            return Err(Error::Config(format!(
                "task `{}` has {} thresholds for {} layers",
                self.task.name,
                self.thresholds.len(),
                config.layers
            )));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Config(format!(
                "task `{}` threshold {t} is negative or non-finite",
                self.task.name
            )));
        }
        self.head.validate(config.dim)
    }

    /// `W + densify(dW)` for every site, materialized once per task.
    pub fn effective_weights(&self, base: &[BlockWeights]) -> Result<Vec<BlockWeights>> {
        base.iter()
            .zip(&self.deltas)
            .map(|(w, deltas)| {
                let heads = w.heads();
                let sites = Site::all(heads)
                    .map(|s| reparameterize(w.site(s), &deltas[s.index(heads)]))
                    .collect::<Result<Vec<_>>>()?;
                BlockWeights::from_sites(heads, sites)
            })
            .collect()
    }
}

/// Base weights and heads plus every sub-task's deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: BackboneConfig,
    /// Patchifier shared by all tasks, `patch_dim x dim`.
    pub embedding: DenseMatrix,
    pub base_task: TaskId,
    pub base_weights: Vec<BlockWeights>,
    pub base_head: TaskHead,
    pub sub_tasks: Vec<DeltaModel>,
}

impl ModelBundle {
    pub fn task_count(&self) -> usize {
        1 + self.sub_tasks.len()
    }

    pub fn task_names(&self) -> Vec<String> {
        std::iter::once(self.base_task.name.clone())
            .chain(self.sub_tasks.iter().map(|s| s.task.name.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.embedding.shape() != (cfg.patch_dim, cfg.dim) {
            return Err(Error::shape("embedding", self.embedding.shape(), (cfg.patch_dim, cfg.dim)));
        }
        if self.base_weights.len() != cfg.layers {
            return Err(Error::Config(format!(
                "{} base blocks for {} layers",
                self.base_weights.len(),
                cfg.layers
            )));
        }
        for w in &self.base_weights {
            w.validate(cfg.dim, cfg.heads)?;
        }
        self.base_head.validate(cfg.dim)?;
        if self.base_task.index != 0 {
            return Err(Error::Config("base task must have index 0".into()));
        }
        let mut names = HashSet::new();
        names.insert(self.base_task.name.as_str());
        for (i, sub) in self.sub_tasks.iter().enumerate() {
            if sub.task.index != i + 1 {
                return Err(Error::Config(format!(
                    "sub-task `{}` has index {}, expected {}",
                    sub.task.name,
                    sub.task.index,
                    i + 1
                )));
            }
            if !names.insert(sub.task.name.as_str()) {
                return Err(Error::Config(format!("duplicate task name `{}`", sub.task.name)));
            }
            sub.validate(cfg)?;
        }
        Ok(())
    }

    /// Rounds every stored value to `f32` so the bundle survives a save/load
    /// round trip bit for bit.
    pub fn round_to_f32(&mut self) {
        self.embedding.round_to_f32();
        for w in &mut self.base_weights {
            w.round_to_f32();
        }
        self.base_head.round_to_f32();
        for t in &mut self.config.thresholds {
            *t = *t as f32 as f64;
        }
        for sub in &mut self.sub_tasks {
            for d in sub.deltas.iter_mut().flatten() {
                d.round_to_f32();
            }
            for t in &mut sub.thresholds {
                *t = *t as f32 as f64;
            }
            sub.head.round_to_f32();
        }
    }
}

/// `W_task = W_base + densify(dW)`. The base is not modified.
pub fn reparameterize(base: &DenseMatrix, delta: &CsrMatrix) -> Result<DenseMatrix> {
    if base.shape() != delta.shape() {
        return Err(Error::shape("reparameterize", base.shape(), delta.shape()));
    }
    let mut out = base.clone();
    for (r, c, v) in delta.iter() {
        out.set(r, c, out.get(r, c) + v);
    }
    Ok(out)
}

/// Bytes per stored value and per index.
const VALUE_BYTES: usize = 4;
const INDEX_BYTES: usize = 4;

pub fn dense_bytes(m: &DenseMatrix) -> usize {
    m.len() * VALUE_BYTES
}

/// Values, column indices and row offsets.
pub fn csr_bytes(m: &CsrMatrix) -> usize {
    m.nnz() * VALUE_BYTES + m.nnz() * INDEX_BYTES + (m.rows() + 1) * INDEX_BYTES
}

pub fn head_bytes(h: &TaskHead) -> usize {
    h.param_count() * VALUE_BYTES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAccount {
    pub task: String,
    pub value: u64,
}

/// Storage per task: dense `f32` blocks plus head for the base, CSR deltas
/// plus head for each sub-task. The shared patchifier is not attributed.
pub fn memory_bytes(bundle: &ModelBundle) -> Vec<TaskAccount> {
    let heads = bundle.config.heads;
    let base = bundle
        .base_weights
        .iter()
        .flat_map(|w| Site::all(heads).map(move |s| dense_bytes(w.site(s))))
        .sum::<usize>()
        + head_bytes(&bundle.base_head);
    let mut out = vec![TaskAccount {
        task: bundle.base_task.name.clone(),
        value: base as u64,
    }];
    out.extend(bundle.sub_tasks.iter().map(|sub| TaskAccount {
        task: sub.task.name.clone(),
        value: (sub.deltas.iter().flatten().map(csr_bytes).sum::<usize>() + head_bytes(&sub.head))
            as u64,
    }));
    out
}

/// Non-zero parameters per task: every dense block element for the base,
/// delta nnz for sub-tasks, plus each task's head.
pub fn param_counts(bundle: &ModelBundle) -> Vec<TaskAccount> {
    let heads = bundle.config.heads;
    let base = bundle
        .base_weights
        .iter()
        .flat_map(|w| Site::all(heads).map(move |s| w.site(s).len()))
        .sum::<usize>()
        + bundle.base_head.param_count();
    let mut out = vec![TaskAccount {
        task: bundle.base_task.name.clone(),
        value: base as u64,
    }];
    out.extend(bundle.sub_tasks.iter().map(|sub| TaskAccount {
        task: sub.task.name.clone(),
        value: (sub.nnz() + sub.head.param_count()) as u64,
    }));
    out
}
