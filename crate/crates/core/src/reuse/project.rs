use crate::error::{Error, Result};
use crate::tensor::{dense_times_csr_into, spmm_into, threshold_q, CsrMatrix, DenseMatrix, OpCounter};
use crate::transformer::SiteActivation;

/// `dense + densify(sparse)`, charging one addition per stored entry.
pub fn add_sparse(
    dense: &DenseMatrix,
    sparse: &CsrMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix> {
    if dense.shape() != sparse.shape() {
        return Err(Error::shape("add_sparse", dense.shape(), sparse.shape()));
    }
    let mut out = dense.clone();
    for (r, c, v) in sparse.iter() {
        out.set(r, c, out.get(r, c) + v);
    }
    counter.charge(0, sparse.nnz());
    Ok(out)
}

/// Sub-task projection that borrows the base task's result for this site:
///
/// `X_re  = dX (W + dW) + X_base_in dW`
/// `X_out = X_base_out + Q(X_re, th)`
///
/// `effective_w` is the materialized `W + dW`. Multiplies charged are exactly
/// `nnz(dX) * D + P * nnz(dW)`. Returns the output and the thresholded
/// correction `Q(X_re, th)`.
pub fn task_reuse_project(
    base: &SiteActivation,
    delta_in: &CsrMatrix,
    effective_w: &DenseMatrix,
    delta_w: &CsrMatrix,
    th: f64,
    counter: &mut OpCounter,
) -> Result<(DenseMatrix, CsrMatrix)> {
    if delta_in.shape() != base.input.shape() {
        return Err(Error::shape("task_reuse delta_in", delta_in.shape(), base.input.shape()));
    }
    if delta_w.shape() != effective_w.shape() {
        return Err(Error::shape("task_reuse delta_w", delta_w.shape(), effective_w.shape()));
    }
    let mut correction = DenseMatrix::zeros(base.output.rows(), base.output.cols());
    spmm_into(delta_in, effective_w, &mut correction, counter)?;
    dense_times_csr_into(&base.input, delta_w, &mut correction, counter)?;
    let kept = threshold_q(&correction, th)?;
    let out = add_sparse(&base.output, &kept, counter)?;
    Ok((out, kept))
}

/// Projection that reuses this task's previous-frame result:
///
/// `dX = Q(X_now - X_prev_in, th)`, `X_out = X_prev_out + dX W`.
///
/// Charges `nnz(dX) * D` multiplies. Returns the output and `dX`.
pub fn temporal_reuse_project(
    prev: &SiteActivation,
    input_now: &DenseMatrix,
    weight: &DenseMatrix,
    th: f64,
    counter: &mut OpCounter,
) -> Result<(DenseMatrix, CsrMatrix)> {
    let diff = input_now.sub(&prev.input)?;
    let delta = threshold_q(&diff, th)?;
    let mut out = prev.output.clone();
    spmm_into(&delta, weight, &mut out, counter)?;
    Ok((out, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dense_matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn sparse(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> CsrMatrix {
        let d = DenseMatrix::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < density {
                StandardNormal.sample(rng)
            } else {
                0.0
            }
        });
        CsrMatrix::from_dense(&d)
    }

    fn base_site(x: &DenseMatrix, w: &DenseMatrix) -> SiteActivation {
        SiteActivation {
            input: x.clone(),
            output: dense_matmul(x, w, &mut OpCounter::new()).unwrap(),
        }
    }

    #[test]
    fn empty_deltas_return_base_output_for_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, w) = (random(4, 6, &mut rng), random(6, 6, &mut rng));
        let base = base_site(&x, &w);
        let mut c = OpCounter::new();
        let (out, kept) =
            task_reuse_project(&base, &CsrMatrix::empty(4, 6), &w, &CsrMatrix::empty(6, 6), 0.0, &mut c)
                .unwrap();
        assert_eq!(out, base.output);
        assert_eq!(kept.nnz(), 0);
        assert_eq!(c, OpCounter::default());
    }

    #[test]
    fn output_threshold_bounds_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, w) = (random(8, 8, &mut rng), random(8, 8, &mut rng));
        let dx = sparse(8, 8, 0.2, &mut rng);
        let dw = sparse(8, 8, 0.1, &mut rng);
        let weff = crate::store::reparameterize(&w, &dw).unwrap();
        let base = base_site(&x, &w);
        let exact = dense_matmul(&x.add(&dx.to_dense()).unwrap(), &weff, &mut OpCounter::new()).unwrap();
        let (out, _) = task_reuse_project(&base, &dx, &weff, &dw, 0.05, &mut OpCounter::new()).unwrap();
        assert!(out.max_abs_diff(&exact) <= 0.05);
    }

    #[test]
    fn static_frame_costs_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, w) = (random(4, 5, &mut rng), random(5, 5, &mut rng));
        let prev = base_site(&x, &w);
        let mut c = OpCounter::new();
        let (out, d) = temporal_reuse_project(&prev, &x, &w, 0.0, &mut c).unwrap();
        assert_eq!(out, prev.output);
        assert_eq!(d.nnz(), 0);
        assert_eq!(c.multiplies, 0);
    }

    #[test]
    fn single_changed_row_counts_d_per_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w) = (random(6, 7, &mut rng), random(7, 7, &mut rng));
        let prev = base_site(&x, &w);
        let mut now = x.clone();
        let th = 0.3;
        let mut expect_nnz = 0;
        for c in 0..7 {
            let step: f64 = rng.gen_range(-1.0..1.0);
            now.set(2, c, x.get(2, c) + step);
            let diff = now.get(2, c) - x.get(2, c);
            if diff.abs() >= th {
                expect_nnz += 1;
            }
        }
        let mut c = OpCounter::new();
        temporal_reuse_project(&prev, &now, &w, th, &mut c).unwrap();
        assert_eq!(c.multiplies, 7 * expect_nnz);
    }
}
