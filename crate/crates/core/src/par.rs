//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run as plain iterators. Every helper returns results in index order and
//! callers reduce sequentially, so outputs are bitwise identical either way and
//! independent of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-accumulates a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_mut<I, T, F>(items: &mut [I], f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(usize, &mut I) -> T + Sync + Send,
{
    items
        .par_iter_mut()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_mut<I, T, F>(items: &mut [I], f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(usize, &mut I) -> T + Sync + Send,
{
    items
        .iter_mut()
        .enumerate()
        .map(|(i, item)| f(i, item))
        .collect()
}

/// Applies `f(row_index, row)` to each `row_len`-sized chunk of `data`.
/// Runs in parallel only when `work` reaches [`MIN_PARALLEL_WORK`].
#[cfg(feature = "parallel")]
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    if work >= MIN_PARALLEL_WORK {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, _work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
