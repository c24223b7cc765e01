//! Synthetic multi-task video clips and the `DLTSDS01` dataset format.
//!
//! Layout (little-endian, values as f64):
//!
//! ```text
//! magic      "DLTSDS01"
//! seed       u64
//! tasks, frames, clips, tokens, patch_dim, classes   u32 x 6
//! correlation, perturbation, motion_fraction        f64 x 3
//! per clip:  frames x (tokens x patch_dim)
//!            tasks x frames x (tokens x classes)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::format::{Reader, Writer};
use crate::tensor::{dense_matmul, DenseMatrix, OpCounter};

pub const DATASET_MAGIC: &[u8; 8] = b"DLTSDS01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub seed: u64,
    /// Number of tasks including the base.
    pub tasks: usize,
    /// Mixing weight between the base target map and a fresh one.
    pub correlation: f64,
    pub frames: usize,
    /// Std of the per-element frame-to-frame change on moving tokens.
    pub perturbation: f64,
    /// Probability that a token moves between consecutive frames.
    pub motion_fraction: f64,
    pub clips: usize,
    pub tokens: usize,
    pub patch_dim: usize,
    pub classes: usize,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 3,
            correlation: 0.95,
            frames: 6,
            perturbation: 0.1,
            motion_fraction: 0.25,
            clips: 12,
            tokens: 8,
            patch_dim: 8,
            classes: 2,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!("correlation {} outside [0, 1]", self.correlation)));
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            return Err(Error::Config(format!("perturbation {} must be >= 0", self.perturbation)));
        }
        if !(0.0..=1.0).contains(&self.motion_fraction) {
            return Err(Error::Config(format!(
                "motion fraction {} outside [0, 1]",
                self.motion_fraction
            )));
        }
        let dims = [
            ("tasks", self.tasks),
            ("frames", self.frames),
            ("clips", self.clips),
            ("tokens", self.tokens),
            ("patch_dim", self.patch_dim),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `frames[t]` is a `tokens x patch_dim` patch matrix.
    pub frames: Vec<DenseMatrix>,
    /// `targets[task][t]` is `tokens x classes`.
    pub targets: Vec<Vec<DenseMatrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthTaskSpec,
    pub clips: Vec<Clip>,
}

impl Dataset {
    /// `(patches, target)` of every frame for one task, clip-major.
    pub fn frames_for(&self, task: usize) -> Vec<(&DenseMatrix, &DenseMatrix)> {
        self.clips
            .iter()
            .flat_map(|c| c.frames.iter().zip(&c.targets[task]))
            .collect()
    }
}

/// Builds the dataset deterministically from `spec.seed`.
///
/// Task `k` targets are `tanh(patches A_k)` with
/// `A_k = rho A_0 + sqrt(1 - rho^2) B_k`. Each moving token changes by
/// `N(0, p^2)` noise clipped to `3p` per element.
pub fn generate_synth(spec: &SynthTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = 1.0 / (spec.patch_dim as f64).sqrt();
    let gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        DenseMatrix::from_fn(rows, cols, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
    };
    let shared = gauss(spec.patch_dim, spec.classes, &mut rng);
    let rho = spec.correlation;
    let fresh_weight = (1.0 - rho * rho).sqrt();
    let mut maps = vec![shared.clone()];
    for _ in 1..spec.tasks {
        let fresh = gauss(spec.patch_dim, spec.classes, &mut rng);
        let mut a = shared.clone();
        a.scale(rho);
        a.axpy(fresh_weight, &fresh)?;
        maps.push(a);
    }

    let p = spec.perturbation;
    let step = if p > 0.0 {
        Some(Normal::new(0.0, p).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut clips = Vec::with_capacity(spec.clips);
    for _ in 0..spec.clips {
        let mut frames = Vec::with_capacity(spec.frames);
        let mut current = DenseMatrix::from_fn(spec.tokens, spec.patch_dim, |_, _| {
            StandardNormal.sample(&mut rng)
        });
        frames.push(current.clone());
        for _ in 1..spec.frames {
            if let Some(step) = &step {
                for t in 0..spec.tokens {
                    if rng.gen::<f64>() < spec.motion_fraction {
                        for v in current.row_mut(t) {
                            *v += step.sample(&mut rng).clamp(-3.0 * p, 3.0 * p);
                        }
                    }
                }
            }
            frames.push(current.clone());
        }
        let mut scratch = OpCounter::new();
        let targets = maps
            .iter()
            .map(|a| {
                frames
                    .iter()
                    .map(|f| Ok(dense_matmul(f, a, &mut scratch)?.map(f64::tanh)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        clips.push(Clip { frames, targets });
    }
    Ok(Dataset { spec: spec.clone(), clips })
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let s = &data.spec;
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u64(s.seed);
    for v in [s.tasks, s.frames, s.clips, s.tokens, s.patch_dim, s.classes] {
        w.u32(v);
    }
    w.f64(s.correlation);
    w.f64(s.perturbation);
    w.f64(s.motion_fraction);
    for clip in &data.clips {
        for f in &clip.frames {
            w.dense_f64(f);
        }
        for task in &clip.targets {
            for t in task {
                w.dense_f64(t);
            }
        }
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let seed = r.u64()?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let [tasks, frames, clips, tokens, patch_dim, classes] = dims;
    let spec = SynthTaskSpec {
        seed,
        tasks,
        frames,
        clips,
        tokens,
        patch_dim,
        classes,
        correlation: r.f64()?,
        perturbation: r.f64()?,
        motion_fraction: r.f64()?,
    };
    spec.validate().map_err(|e| Error::Corrupt(format!("dataset header: {e}")))?;
    let mut out = Vec::with_capacity(clips.min(bytes.len()));
    for _ in 0..clips {
        let frames_v = (0..frames)
            .map(|_| r.dense_f64(tokens, patch_dim))
            .collect::<Result<Vec<_>>>()?;
        let targets = (0..tasks)
            .map(|_| (0..frames).map(|_| r.dense_f64(tokens, classes)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        out.push(Clip { frames: frames_v, targets });
    }
    r.finish()?;
    Ok(Dataset { spec, clips: out })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
