use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed-sparse-row matrix with 32-bit indices.
///
/// Canonical form: column indices strictly increase within a row and no
/// explicit zeros are stored, so two equal matrices have identical arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<u32>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from raw arrays, rejecting anything that violates the canonical
    /// invariants. `name` labels the matrix in the error.
    pub fn from_parts(
        name: &str,
        rows: usize,
        cols: usize,
        row_offsets: Vec<u32>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        };
        m.validate(name)?;
        Ok(m)
    }

    /// Keeps every entry whose value is not exactly zero.
    pub fn from_dense(dense: &DenseMatrix) -> Self {
        Self::from_dense_filtered(dense, |x| x != 0.0)
    }

    pub(crate) fn from_dense_filtered(dense: &DenseMatrix, keep: impl Fn(f64) -> bool) -> Self {
        let (rows, cols) = dense.shape();
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0u32);
        for r in 0..rows {
            for (c, &x) in dense.row(r).iter().enumerate() {
                if x != 0.0 && keep(x) {
                    col_indices.push(c as u32);
                    values.push(x);
                }
            }
            row_offsets.push(values.len() as u32);
        }
        Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Builds from `(row, col, value)` triplets; zero values are dropped and
    /// duplicate positions rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0u32; rows + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({r},{c}) outside {rows}x{cols}"
                )));
            }
            if last == Some((r, c)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate triplet at ({r},{c})"
                )));
            }
            last = Some((r, c));
            if v != 0.0 {
                row_offsets[r + 1] += 1;
                col_indices.push(c as u32);
                values.push(v);
            }
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let err = |row: Option<usize>, reason: String| Error::InvalidCsr {
            matrix: name.to_string(),
            row,
            reason,
        };
        if self.row_offsets.len() != self.rows + 1 {
            return Err(err(
                None,
                format!(
                    "row_offsets has length {}, expected {}",
                    self.row_offsets.len(),
                    self.rows + 1
                ),
            ));
        }
        if self.row_offsets[0] != 0 {
            return Err(err(Some(0), "row_offsets[0] must be 0".into()));
        }
        if self.col_indices.len() != self.values.len() {
            return Err(err(
                None,
                format!(
                    "{} column indices but {} values",
                    self.col_indices.len(),
                    self.values.len()
                ),
            ));
        }
        for r in 0..self.rows {
            if self.row_offsets[r + 1] < self.row_offsets[r] {
                return Err(err(Some(r), "row_offsets decreasing".into()));
            }
        }
        if self.row_offsets[self.rows] as usize != self.values.len() {
            return Err(err(
                None,
                format!(
                    "row_offsets ends at {}, nnz is {}",
                    self.row_offsets[self.rows],
                    self.values.len()
                ),
            ));
        }
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (k, (&c, &v)) in idx.iter().zip(vals).enumerate() {
                if c as usize >= self.cols {
                    return Err(err(
                        Some(r),
                        format!("column {c} out of range for {} columns", self.cols),
                    ));
                }
                if k > 0 && idx[k - 1] >= c {
                    return Err(err(Some(r), "column indices not strictly increasing".into()));
                }
                if v == 0.0 {
                    return Err(err(Some(r), format!("explicit zero stored at column {c}")));
                }
                if !v.is_finite() {
                    return Err(err(Some(r), format!("non-finite value at column {c}")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[u32] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values may be edited in place; the sparsity pattern may not.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_offsets[r] as usize, self.row_offsets[r + 1] as usize);
        (&self.col_indices[a..b], &self.values[a..b])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, vals) = self.row(r);
            idx.iter().zip(vals).map(move |(&c, &v)| (r, c as usize, v))
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    /// Drops stored entries that became exactly zero (e.g. after rounding).
    pub fn prune_zeros(&mut self) {
        let mut new_offsets = Vec::with_capacity(self.rows + 1);
        let mut new_idx = Vec::with_capacity(self.nnz());
        let mut new_vals = Vec::with_capacity(self.nnz());
        new_offsets.push(0u32);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                if v != 0.0 {
                    new_idx.push(c);
                    new_vals.push(v);
                }
            }
            new_offsets.push(new_vals.len() as u32);
        }
        self.row_offsets = new_offsets;
        self.col_indices = new_idx;
        self.values = new_vals;
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self.prune_zeros();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_roundtrip_drops_zeros() {
        let d = DenseMatrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap();
        let s = CsrMatrix::from_dense(&d);
        assert_eq!(s.nnz(), 1);
        assert_eq!(s.row_offsets(), &[0, 1, 1]);
        assert_eq!(s.col_indices(), &[1]);
        assert_eq!(s.to_dense(), d);
    }

    #[test]
    fn decreasing_offsets_rejected_with_row() {
        let e = CsrMatrix::from_parts("w", 2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 2.0])
            .unwrap_err();
        match e {
            Error::InvalidCsr { matrix, row, .. } => {
                assert_eq!(matrix, "w");
                assert_eq!(row, Some(1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsorted_columns_and_explicit_zero_rejected() {
        assert!(CsrMatrix::from_parts("a", 1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::from_parts("a", 1, 3, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(CsrMatrix::from_parts("a", 1, 3, vec![0, 1], vec![0], vec![0.0]).is_err());
        assert!(CsrMatrix::from_parts("a", 1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        assert!(CsrMatrix::from_parts("a", 1, 3, vec![1, 1], vec![0], vec![1.0]).is_err());
    }

    #[test]
    fn triplets_sorted_and_duplicates_rejected() {
        let m = CsrMatrix::from_triplets(2, 3, vec![(1, 2, 3.0), (0, 1, 1.0), (1, 0, 0.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.row_offsets(), &[0, 1, 2]);
        assert!(CsrMatrix::from_triplets(2, 3, vec![(0, 1, 1.0), (0, 1, 2.0)]).is_err());
    }

    #[test]
    fn rounding_prunes_underflow() {
        let mut m = CsrMatrix::from_triplets(1, 2, vec![(0, 0, 1e-60), (0, 1, 0.5)]).unwrap();
        m.round_to_f32();
        assert_eq!(m.nnz(), 1);
        m.validate("m").unwrap();
    }
}
