use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// One of the `4h + 2` linear projections in a block.
///
/// The output projection `W_O` (`Dh x D`) is split into `h` row blocks, one per
/// head, so `Concat(head_1..head_h) W_O = sum_i head_i W_O[i]`. Every site then
/// maps a `P x D` input through a `D x D` weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    Query(usize),
    Key(usize),
    Value(usize),
    Output(usize),
    Ffn1,
    Ffn2,
}

impl Site {
    pub fn count(heads: usize) -> usize {
        4 * heads + 2
    }

    /// Canonical order: `q0 k0 v0 q1 k1 v1 .. o0 .. o(h-1) ffn1 ffn2`.
    pub fn index(self, heads: usize) -> usize {
        match self {
            Site::Query(i) => 3 * i,
            Site::Key(i) => 3 * i + 1,
            Site::Value(i) => 3 * i + 2,
            Site::Output(i) => 3 * heads + i,
            Site::Ffn1 => 4 * heads,
            Site::Ffn2 => 4 * heads + 1,
        }
    }

    pub fn from_index(index: usize, heads: usize) -> Site {
        if index < 3 * heads {
            match index % 3 {
                0 => Site::Query(index / 3),
                1 => Site::Key(index / 3),
                _ => Site::Value(index / 3),
            }
        } else if index < 4 * heads {
            Site::Output(index - 3 * heads)
        } else if index == 4 * heads {
            Site::Ffn1
        } else {
            assert!(index == 4 * heads + 1, "site index {index} out of range");
            Site::Ffn2
        }
    }

    pub fn all(heads: usize) -> impl Iterator<Item = Site> {
        (0..Self::count(heads)).map(move |i| Site::from_index(i, heads))
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Query(i) => write!(f, "q{i}"),
            Site::Key(i) => write!(f, "k{i}"),
            Site::Value(i) => write!(f, "v{i}"),
            Site::Output(i) => write!(f, "o{i}"),
            Site::Ffn1 => f.write_str("ffn1"),
            Site::Ffn2 => f.write_str("ffn2"),
        }
    }
}

/// The projection matrices of one transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub query: Vec<DenseMatrix>,
    pub key: Vec<DenseMatrix>,
    pub value: Vec<DenseMatrix>,
    /// Row blocks of `W_O`, one `D x D` block per head.
    pub output: Vec<DenseMatrix>,
    pub ffn1: DenseMatrix,
    pub ffn2: DenseMatrix,
}

impl BlockWeights {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn dim(&self) -> usize {
        self.ffn1.rows()
    }

    pub fn site(&self, site: Site) -> &DenseMatrix {
        match site {
            Site::Query(i) => &self.query[i],
            Site::Key(i) => &self.key[i],
            Site::Value(i) => &self.value[i],
            Site::Output(i) => &self.output[i],
            Site::Ffn1 => &self.ffn1,
            Site::Ffn2 => &self.ffn2,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut DenseMatrix {
        match site {
            Site::Query(i) => &mut self.query[i],
            Site::Key(i) => &mut self.key[i],
            Site::Value(i) => &mut self.value[i],
            Site::Output(i) => &mut self.output[i],
            Site::Ffn1 => &mut self.ffn1,
            Site::Ffn2 => &mut self.ffn2,
        }
    }

    /// Builds from per-site matrices in canonical order.
    pub fn from_sites(heads: usize, mut sites: Vec<DenseMatrix>) -> Result<Self> {
        if sites.len() != Site::count(heads) {
            return Err(Error::InvalidArgument(format!(
                "expected {} projection matrices for {heads} heads, got {}",
                Site::count(heads),
                sites.len()
            )));
        }
        let ffn2 = sites.pop().unwrap();
        let ffn1 = sites.pop().unwrap();
        let output = sites.split_off(3 * heads);
        let mut query = Vec::with_capacity(heads);
        let mut key = Vec::with_capacity(heads);
        let mut value = Vec::with_capacity(heads);
        let mut it = sites.into_iter();
        for _ in 0..heads {
            query.push(it.next().unwrap());
            key.push(it.next().unwrap());
            value.push(it.next().unwrap());
        }
        let w = Self {
            query,
            key,
            value,
            output,
            ffn1,
            ffn2,
        };
        w.validate(w.dim(), heads)?;
        Ok(w)
    }

    pub fn into_sites(self) -> Vec<DenseMatrix> {
        let heads = self.heads();
        let mut out = Vec::with_capacity(Site::count(heads));
        let mut q = self.query.into_iter();
        let mut k = self.key.into_iter();
        let mut v = self.value.into_iter();
        for _ in 0..heads {
            out.push(q.next().unwrap());
            out.push(k.next().unwrap());
            out.push(v.next().unwrap());
        }
        out.extend(self.output);
        out.push(self.ffn1);
        out.push(self.ffn2);
        out
    }

    /// The full `(D*h) x D` output projection.
    pub fn w_o(&self) -> DenseMatrix {
        DenseMatrix::vstack(&self.output).expect("output blocks share a width")
    }

    pub fn validate(&self, dim: usize, heads: usize) -> Result<()> {
        if self.query.len() != heads
            || self.key.len() != heads
            || self.value.len() != heads
            || self.output.len() != heads
        {
            return Err(Error::Config(format!(
                "block weights carry {} heads, config has {heads}",
                self.query.len()
            )));
        }
        for site in Site::all(heads) {
            let w = self.site(site);
            if w.shape() != (dim, dim) {
                return Err(Error::shape("block weight", w.shape(), (dim, dim)));
            }
            if !w.is_finite() {
                return Err(Error::Config(format!("non-finite weight at site {site}")));
            }
        }
        Ok(())
    }

    /// Gaussian init with standard deviation `scale / sqrt(dim)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale / (dim as f64).sqrt()).expect("valid std");
        let sites = (0..Site::count(heads))
            .map(|_| DenseMatrix::from_fn(dim, dim, |_, _| normal.sample(rng)))
            .collect();
        Self::from_sites(heads, sites).expect("consistent shapes")
    }

    pub fn round_to_f32(&mut self) {
        for s in Site::all(self.heads()) {
            self.site_mut(s).round_to_f32();
        }
    }
}

/// Linear per-token head `D -> C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl TaskHead {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        let h = Self { weight, bias };
        h.validate(h.weight.rows())?;
        Ok(h)
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(dim, classes),
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.weight.rows() != dim || self.bias.len() != self.weight.cols() {
            return Err(Error::shape(
                "task head",
                self.weight.shape(),
                (dim, self.bias.len()),
            ));
        }
        if !self.weight.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("non-finite task head".into()));
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        for b in &mut self.bias {
            *b = *b as f32 as f64;
        }
    }
}
