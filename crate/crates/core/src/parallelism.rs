//! Sequential/parallel execution helpers.
//!
//! Everything data-parallel in this crate funnels through [`map_collect`] and
//! [`for_each_mut_chunk`]. With the `parallel` feature enabled (the default)
//! they run on rayon; without it, or after [`set_parallel`]`(false)`, they run
//! sequentially. Results are bitwise-identical either way: the helpers only
//! map independent items and callers combine partial results in index order.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Runtime switch, mostly for benchmarks comparing the two execution paths.
/// Has no effect when the `parallel` feature is compiled out.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to each chunk of `data` split every `chunk_len` elements.
/// Chunks are disjoint, so the parallel path needs no synchronisation.
pub fn for_each_mut_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}
