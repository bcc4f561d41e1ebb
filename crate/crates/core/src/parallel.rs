//! Data-parallel dispatch with a deterministic contract.
//!
//! `map_indexed` evaluates an indexed job list and returns results in index
//! order, so reductions over its output are identical no matter how many
//! worker threads run. Built without the `parallel` feature it degrades to a
//! plain sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f(0..count)` and collect results in index order.
pub fn map_indexed<T: Send>(count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Split `buf` into `size`-sized chunks and map `f(chunk_index, chunk)` over
/// them, returning results in chunk order.
pub fn map_chunks_mut<T: Send, R: Send>(
    buf: &mut [T],
    size: usize,
    f: impl Fn(usize, &mut [T]) -> R + Sync + Send,
) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(size).enumerate().map(|(i, c)| f(i, c)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(size).enumerate().map(|(i, c)| f(i, c)).collect()
    }
}

/// Chunk two equal-length slices in lockstep and run `f(chunk_start, a, b)`
/// over the pairs.
pub fn for_each_chunk_pair_mut<T: Send, U: Send>(
    a: &mut [T],
    b: &mut [U],
    size: usize,
    f: impl Fn(usize, &mut [T], &mut [U]) + Sync + Send,
) {
    assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    {
        a.par_chunks_mut(size)
            .zip(b.par_chunks_mut(size))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i * size, ca, cb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(size)
            .zip(b.chunks_mut(size))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i * size, ca, cb));
    }
}

/// Configure the global worker count. `0` keeps the library default. Calling
/// this more than once is allowed; later calls are ignored by rayon.
pub fn set_jobs(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        if jobs > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
    }
}
