//! Chunked iteration that runs on the rayon pool when the `parallel`
//! feature is on and falls back to a plain loop otherwise.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(index, chunk)` for each `chunk_len` slice of `out` and sums the
/// returned counters. Chunks are disjoint, so the output never depends on
/// scheduling.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F) -> u64
where
    T: Send,
    F: Fn(usize, &mut [T]) -> u64 + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if rayon::current_num_threads() > 1 {
            return out
                .par_chunks_mut(chunk_len)
                .enumerate()
                .map(|(i, chunk)| f(i, chunk))
                .sum();
        }
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .map(|(i, chunk)| f(i, chunk))
        .sum()
}

/// Runs `f` on a pool of `threads` workers. With the `parallel` feature off
/// this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Number of worker threads kernels will use from the current context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
