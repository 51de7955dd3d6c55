//! Maybe-parallel helpers for per-point kernels.
//!
//! Every kernel routed through here writes each output row from exactly one
//! task and keeps inner reductions in fixed order, so results are bitwise
//! identical whether the `parallel` feature is on, off, or running on a
//! single-thread pool.
//!
//! Tiny workloads run inline: dispatching sub-microsecond tasks to the pool
//! costs far more than the work itself.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of elements a kernel must touch before the pool is used.
const PAR_MIN_ELEMS: usize = 16 * 1024;

/// Apply `f(row_index, row)` to every `row_len`-sized chunk of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if data.is_empty() {
        return;
    }
    debug_assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_MIN_ELEMS {
            let rows_per_task = (PAR_MIN_ELEMS / row_len).max(1);
            data.par_chunks_mut(row_len)
                .with_min_len(rows_per_task)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Collect `f(i)` for `i in 0..n`, preserving index order. Meant for
/// per-item work on the order of at least a microsecond (KNN queries,
/// whole-point votes).
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= 64 {
            return (0..n).into_par_iter().with_min_len(32).map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Elementwise in-place map.
pub fn for_each_elem_mut<F>(data: &mut [f64], f: F)
where
    F: Fn(usize, &mut f64) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if data.len() >= PAR_MIN_ELEMS {
            data.par_iter_mut()
                .with_min_len(PAR_MIN_ELEMS / 4)
                .enumerate()
                .for_each(|(i, x)| f(i, x));
            return;
        }
    }
    data.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}
