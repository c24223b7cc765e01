//! Matrix kernels. Each one charges its [`OpCounter`] with the exact number of
//! scalar multiplies it performs and one addition per accumulated product.

use super::{CsrMatrix, DenseMatrix, OpCounter};
use crate::error::{Error, Result};
use crate::par;

fn check_inner(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a.1 != b.0 {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

#[inline]
fn matmul_row(a: &DenseMatrix, b: &DenseMatrix, i: usize, out: &mut [f64]) {
    let n = b.cols();
    let bd = b.as_slice();
    for (p, &x) in a.row(i).iter().enumerate() {
        let brow = &bd[p * n..(p + 1) * n];
        for (o, &y) in out.iter_mut().zip(brow) {
            *o += x * y;
        }
    }
}

/// `A x B`; charges `A.rows * A.cols * B.cols` multiplies.
pub fn dense_matmul(a: &DenseMatrix, b: &DenseMatrix, counter: &mut OpCounter) -> Result<DenseMatrix> {
    check_inner("dense_matmul", a.shape(), b.shape())?;
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseMatrix::zeros(m, n);
    par::for_each_row(out.as_mut_slice(), n, m * k * n, |i, row| matmul_row(a, b, i, row));
    counter.charge(m * k * n, m * k * n);
    Ok(out)
}

#[inline]
fn spmm_row(a: &CsrMatrix, b: &DenseMatrix, i: usize, out: &mut [f64]) {
    let n = b.cols();
    let bd = b.as_slice();
    let (idx, vals) = a.row(i);
    for (&c, &v) in idx.iter().zip(vals) {
        let c = c as usize;
        let brow = &bd[c * n..(c + 1) * n];
        for (o, &y) in out.iter_mut().zip(brow) {
            *o += v * y;
        }
    }
}

fn check_csr(a: &CsrMatrix) -> Result<()> {
    // Full validation is linear in nnz and cheap next to the product itself.
    a.validate("operand")
}

/// Sparse `A` times dense `B`; charges `nnz(A) * B.cols` multiplies.
pub fn spmm(a: &CsrMatrix, b: &DenseMatrix, counter: &mut OpCounter) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    spmm_into(a, b, &mut out, counter)?;
    Ok(out)
}

/// `out += A x B` for sparse `A`.
pub fn spmm_into(
    a: &CsrMatrix,
    b: &DenseMatrix,
    out: &mut DenseMatrix,
    counter: &mut OpCounter,
) -> Result<()> {
    check_inner("spmm", a.shape(), b.shape())?;
    if out.shape() != (a.rows(), b.cols()) {
        return Err(Error::shape("spmm output", out.shape(), (a.rows(), b.cols())));
    }
    check_csr(a)?;
    let n = b.cols();
    let work = a.nnz() * n;
    par::for_each_row(out.as_mut_slice(), n, work, |i, row| spmm_row(a, b, i, row));
    counter.charge(work, work);
    Ok(())
}

#[inline]
fn dense_times_csr_row(a: &DenseMatrix, b: &CsrMatrix, i: usize, out: &mut [f64]) {
    for (r, &x) in a.row(i).iter().enumerate() {
        let (idx, vals) = b.row(r);
        for (&c, &v) in idx.iter().zip(vals) {
            out[c as usize] += x * v;
        }
    }
}

/// Dense `A` times sparse `B`; charges `A.rows * nnz(B)` multiplies.
pub fn dense_times_csr(a: &DenseMatrix, b: &CsrMatrix, counter: &mut OpCounter) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(a.rows(), b.cols());
    dense_times_csr_into(a, b, &mut out, counter)?;
    Ok(out)
}

/// `out += A x B` for sparse `B`.
pub fn dense_times_csr_into(
    a: &DenseMatrix,
    b: &CsrMatrix,
    out: &mut DenseMatrix,
    counter: &mut OpCounter,
) -> Result<()> {
    check_inner("dense_times_csr", a.shape(), b.shape())?;
    if out.shape() != (a.rows(), b.cols()) {
        return Err(Error::shape("dense_times_csr output", out.shape(), (a.rows(), b.cols())));
    }
    check_csr(b)?;
    let work = a.rows() * b.nnz();
    par::for_each_row(out.as_mut_slice(), b.cols(), work, |i, row| {
        dense_times_csr_row(a, b, i, row)
    });
    counter.charge(work, work);
    Ok(())
}

/// Zeroes every element with `|x| < th` and returns the survivors as CSR.
/// Ties (`|x| == th`) are kept.
pub fn threshold_q(x: &DenseMatrix, th: f64) -> Result<CsrMatrix> {
    if !th.is_finite() || th < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold must be finite and non-negative, got {th}"
        )));
    }
    Ok(CsrMatrix::from_dense_filtered(x, |v| v.abs() >= th))
}

/// Ratio of non-zero entries.
pub trait Density {
    fn density(&self) -> f64;
}

impl Density for DenseMatrix {
    fn density(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.count_nonzero() as f64 / self.len() as f64
    }
}

impl Density for CsrMatrix {
    fn density(&self) -> f64 {
        let total = self.rows() * self.cols();
        if total == 0 {
            return 0.0;
        }
        self.nnz() as f64 / total as f64
    }
}

pub fn density<M: Density + ?Sized>(m: &M) -> f64 {
    m.density()
}

/// Single-threaded versions of the product kernels, always compiled. The
/// public kernels produce bitwise-identical results; these exist so the two
/// execution paths can be compared side by side.
pub mod sequential {
    use super::*;

    pub fn dense_matmul(
        a: &DenseMatrix,
        b: &DenseMatrix,
        counter: &mut OpCounter,
    ) -> Result<DenseMatrix> {
        check_inner("dense_matmul", a.shape(), b.shape())?;
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = DenseMatrix::zeros(m, n);
        for (i, row) in out.as_mut_slice().chunks_mut(n.max(1)).enumerate().take(m) {
            matmul_row(a, b, i, row);
        }
        counter.charge(m * k * n, m * k * n);
        Ok(out)
    }

    pub fn spmm(a: &CsrMatrix, b: &DenseMatrix, counter: &mut OpCounter) -> Result<DenseMatrix> {
        check_inner("spmm", a.shape(), b.shape())?;
        check_csr(a)?;
        let n = b.cols();
        let mut out = DenseMatrix::zeros(a.rows(), n);
        for (i, row) in out.as_mut_slice().chunks_mut(n.max(1)).enumerate().take(a.rows()) {
            spmm_row(a, b, i, row);
        }
        counter.charge(a.nnz() * n, a.nnz() * n);
        Ok(out)
    }

    pub fn dense_times_csr(
        a: &DenseMatrix,
        b: &CsrMatrix,
        counter: &mut OpCounter,
    ) -> Result<DenseMatrix> {
        check_inner("dense_times_csr", a.shape(), b.shape())?;
        check_csr(b)?;
        let n = b.cols();
        let mut out = DenseMatrix::zeros(a.rows(), n);
        for (i, row) in out.as_mut_slice().chunks_mut(n.max(1)).enumerate().take(a.rows()) {
            dense_times_csr_row(a, b, i, row);
        }
        let work = a.rows() * b.nnz();
        counter.charge(work, work);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_times_b() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut c = OpCounter::new();
        assert_eq!(dense_matmul(&DenseMatrix::identity(2), &b, &mut c).unwrap(), b);
    }

    #[test]
    fn ones_product_and_count() {
        let a = DenseMatrix::filled(2, 3, 1.0);
        let b = DenseMatrix::filled(3, 2, 1.0);
        let mut c = OpCounter::new();
        let out = dense_matmul(&a, &b, &mut c).unwrap();
        assert_eq!(out, DenseMatrix::filled(2, 2, 3.0));
        assert_eq!(c.multiplies, 12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = dense_matmul(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(2, 2), &mut OpCounter::new())
            .unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn spmm_single_nonzero() {
        let a = CsrMatrix::from_dense(&m(&[&[0.0, 2.0], &[0.0, 0.0]]));
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut c = OpCounter::new();
        let out = spmm(&a, &b, &mut c).unwrap();
        assert_eq!(out, m(&[&[6.0, 8.0], &[0.0, 0.0]]));
        assert_eq!(c.multiplies, 2);
    }

    #[test]
    fn spmm_empty_is_zero() {
        let a = CsrMatrix::empty(3, 2);
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut c = OpCounter::new();
        assert_eq!(spmm(&a, &b, &mut c).unwrap(), DenseMatrix::zeros(3, 2));
        assert_eq!(c, OpCounter::default());
    }

    #[test]
    fn dense_times_csr_single_nonzero() {
        let a = m(&[&[1.0, 2.0]]);
        let b = CsrMatrix::from_dense(&m(&[&[0.0, 0.0], &[3.0, 0.0]]));
        let mut c = OpCounter::new();
        assert_eq!(dense_times_csr(&a, &b, &mut c).unwrap(), m(&[&[6.0, 0.0]]));
        assert_eq!(c.multiplies, 1);
        let e = CsrMatrix::empty(2, 2);
        assert_eq!(dense_times_csr(&a, &e, &mut c).unwrap(), DenseMatrix::zeros(1, 2));
    }

    #[test]
    fn threshold_examples() {
        let x = m(&[&[0.5, -0.2, 0.05]]);
        let q = threshold_q(&x, 0.1).unwrap();
        assert_eq!(q.iter().collect::<Vec<_>>(), vec![(0, 0, 0.5), (0, 1, -0.2)]);
        assert_eq!(threshold_q(&x, 0.0).unwrap().to_dense(), x);
        // tie is kept
        assert_eq!(threshold_q(&x, 0.2).unwrap().nnz(), 2);
        assert!(matches!(threshold_q(&x, -0.1), Err(Error::InvalidArgument(_))));
        assert!(threshold_q(&x, f64::NAN).is_err());
    }

    #[test]
    fn density_examples() {
        assert_eq!(density(&m(&[&[0.0, 1.0], &[0.0, 3.0]])), 0.5);
        assert_eq!(density(&DenseMatrix::zeros(3, 3)), 0.0);
        let trips = (0..12).map(|i| (i / 8, i % 8, 1.0)).collect();
        assert_eq!(density(&CsrMatrix::from_triplets(8, 8, trips).unwrap()), 0.1875);
    }
}
