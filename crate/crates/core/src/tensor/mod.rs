//! Dense and CSR matrices plus the multiply-counting kernels.

mod counter;
mod csr;
mod dense;
pub mod kernels;

pub use counter::OpCounter;
pub use csr::CsrMatrix;
pub use dense::DenseMatrix;
pub use kernels::{
    dense_matmul, dense_times_csr, dense_times_csr_into, density, spmm, spmm_into, threshold_q,
    Density,
};
