//! The `DLTSHR01` bundle file.
//!
//! Everything is little-endian; reals are stored as `f32`.
//!
//! ```text
//! magic        8 bytes  "DLTSHR01"
//! header       u32 x 7  layers, dim, heads, tokens, patch_dim, task_count, flags
//! task table   per task: u32 name_len, name (UTF-8), u32 classes
//! base         f32[layers]           base temporal thresholds
//!              f32[patch_dim*dim]    patchifier
//!              per layer: per head (W_Q, W_K, W_V), then W_O (dim*heads x dim),
//!              W_F1, W_F2, each row-major f32
//!              head weight f32[dim*classes], head bias f32[classes]
//! sub-tasks    per sub-task: f32[layers] thresholds,
//!              per layer, per site (canonical order) one CSR section:
//!                u32 rows, u32 cols, u32 nnz, u32[rows+1] row offsets,
//!                u32[nnz] column indices, f32[nnz] values
//!              head weight, head bias
//! ```
//!
//! Flag bit 0 enables post-block normalization. No bytes may follow the last
//! section.

use std::fs;
use std::path::Path;

use super::{DeltaModel, ModelBundle, TaskId};
use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, DenseMatrix};
use crate::transformer::{BackboneConfig, BlockWeights, Site, TaskHead};

pub const MAGIC: &[u8; 8] = b"DLTSHR01";
const FLAG_POST_NORM: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn dense_f32(&mut self, m: &DenseMatrix) {
        for &v in m.as_slice() {
            self.f32(v);
        }
    }

    pub(crate) fn dense_f64(&mut self, m: &DenseMatrix) {
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f64> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()) as f64)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    /// Checks the remaining length up front so a corrupt count fails as
    /// truncation instead of a huge allocation.
    fn reserve(&self, count: usize, width: usize) -> Result<()> {
        let needed = count.saturating_mul(width);
        if self.buf.len() - self.pos < needed {
            return Err(Error::Truncated {
                offset: self.pos,
                needed,
                available: self.buf.len() - self.pos,
            });
        }
        Ok(())
    }

    fn dense_f32(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        self.reserve(rows * cols, 4)?;
        let data = (0..rows * cols).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, data)
    }

    pub(crate) fn dense_f64(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        self.reserve(rows * cols, 8)?;
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_vec(rows, cols, data)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Corrupt("task name is not UTF-8".into()))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = match self.take(8) {
            Ok(b) => b,
            Err(_) => {
                return Err(Error::Version {
                    found: String::from_utf8_lossy(&self.buf[self.pos..]).into_owned(),
                })
            }
        };
        if found != expected {
            return Err(Error::Version {
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_csr(m: &CsrMatrix, out: &mut Vec<u8>) {
    let mut w = Writer::new();
    write_csr(&mut w, m);
    out.extend_from_slice(&w.finish());
}

pub fn decode_csr(name: &str, bytes: &[u8]) -> Result<CsrMatrix> {
    let mut r = Reader::new(bytes);
    let m = read_csr(&mut r, name)?;
    r.finish()?;
    Ok(m)
}

fn write_csr(w: &mut Writer, m: &CsrMatrix) {
    w.u32(m.rows());
    w.u32(m.cols());
    w.u32(m.nnz());
    for &o in m.row_offsets() {
        w.u32(o as usize);
    }
    for &c in m.col_indices() {
        w.u32(c as usize);
    }
    for &v in m.values() {
        w.f32(v);
    }
}

fn read_csr(r: &mut Reader<'_>, name: &str) -> Result<CsrMatrix> {
    let rows = r.u32()?;
    let cols = r.u32()?;
    let nnz = r.u32()?;
    r.reserve(rows + 1 + 2 * nnz, 4)?;
    let offsets = (0..=rows).map(|_| r.u32().map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
    let cols_idx = (0..nnz).map(|_| r.u32().map(|v| v as u32)).collect::<Result<Vec<_>>>()?;
    let values = (0..nnz).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    CsrMatrix::from_parts(name, rows, cols, offsets, cols_idx, values)
}

fn write_head(w: &mut Writer, h: &TaskHead) {
    w.dense_f32(&h.weight);
    for &b in &h.bias {
        w.f32(b);
    }
}

fn read_head(r: &mut Reader<'_>, dim: usize, classes: usize) -> Result<TaskHead> {
    let weight = r.dense_f32(dim, classes)?;
    let bias = (0..classes).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    TaskHead::new(weight, bias)
}

/// Serializes a bundle; values are rounded to `f32`.
pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut b = bundle.clone();
    b.round_to_f32();
    let cfg = &b.config;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    for v in [cfg.layers, cfg.dim, cfg.heads, cfg.tokens, cfg.patch_dim, b.task_count()] {
        w.u32(v);
    }
    w.u32(if cfg.post_norm { FLAG_POST_NORM as usize } else { 0 });
    w.string(&b.base_task.name);
    w.u32(b.base_head.classes());
    for sub in &b.sub_tasks {
        w.string(&sub.task.name);
        w.u32(sub.head.classes());
    }
    for &t in &cfg.thresholds {
        w.f32(t);
    }
    w.dense_f32(&b.embedding);
    for block in &b.base_weights {
        for s in Site::all(cfg.heads) {
            w.dense_f32(block.site(s));
        }
    }
    write_head(&mut w, &b.base_head);
    for sub in &b.sub_tasks {
        for &t in &sub.thresholds {
            w.f32(t);
        }
        for delta in sub.deltas.iter().flatten() {
            write_csr(&mut w, delta);
        }
        write_head(&mut w, &sub.head);
    }
    Ok(w.finish())
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let layers = r.u32()?;
    let dim = r.u32()?;
    let heads = r.u32()?;
    let tokens = r.u32()?;
    let patch_dim = r.u32()?;
    let task_count = r.u32()?;
    let flags = r.u32()? as u32;
    if flags & !FLAG_POST_NORM != 0 {
        return Err(Error::Corrupt(format!("unknown header flags {flags:#x}")));
    }
    if task_count == 0 {
        return Err(Error::Corrupt("bundle declares no tasks".into()));
    }
    if dim == 0 || heads == 0 || tokens == 0 || patch_dim == 0 {
        return Err(Error::Corrupt("zero model dimension in header".into()));
    }
    let mut tasks = Vec::new();
    for _ in 0..task_count {
        let name = r.string()?;
        let classes = r.u32()?;
        tasks.push((name, classes));
    }
    let thresholds = (0..layers).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let config = BackboneConfig {
        layers,
        dim,
        heads,
        tokens,
        patch_dim,
        thresholds,
        post_norm: flags & FLAG_POST_NORM != 0,
    };
    let embedding = r.dense_f32(patch_dim, dim)?;
    let mut base_weights = Vec::with_capacity(layers);
    for _ in 0..layers {
        let sites = (0..Site::count(heads))
            .map(|_| r.dense_f32(dim, dim))
            .collect::<Result<Vec<_>>>()?;
        base_weights.push(BlockWeights::from_sites(heads, sites)?);
    }
    let base_head = read_head(&mut r, dim, tasks[0].1)?;
    let mut sub_tasks = Vec::with_capacity(task_count - 1);
    for (index, (name, classes)) in tasks.iter().enumerate().skip(1) {
        let thresholds = (0..layers).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let mut deltas = Vec::with_capacity(layers);
        for l in 0..layers {
            let layer = Site::all(heads)
                .map(|s| read_csr(&mut r, &format!("{name}/layer{l}/{s}")))
                .collect::<Result<Vec<_>>>()?;
            deltas.push(layer);
        }
        let head = read_head(&mut r, dim, *classes)?;
        sub_tasks.push(DeltaModel {
            task: TaskId::new(name.clone(), index),
            deltas,
            thresholds,
            head,
        });
    }
    r.finish()?;
    let bundle = ModelBundle {
        config,
        embedding,
        base_task: TaskId::new(tasks[0].0.clone(), 0),
        base_weights,
        base_head,
        sub_tasks,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bundle(bundle)?)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    decode_bundle(&fs::read(path)?)
}
