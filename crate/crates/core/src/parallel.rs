//! Deterministic work sharding over scoped threads.
//!
//! Indices are split into contiguous blocks, one per worker, and results come
//! back in index order, so any reduction done by the caller over the returned
//! vector has a fixed summation order regardless of the worker count.

use std::thread;

/// Number of logical cores, at least 1.
pub fn available_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Contiguous block `[start, end)` assigned to worker `w` of `workers`.
pub fn shard_bounds(n: usize, workers: usize, w: usize) -> (usize, usize) {
    (w * n / workers, (w + 1) * n / workers)
}

/// Evaluates `f(i)` for `i in 0..n` on up to `workers` threads; output is in
/// index order. The first error (lowest index) wins.
pub fn map_indexed<T, E, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let f = &f;
    let blocks: Vec<Vec<Result<T, E>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (lo, hi) = shard_bounds(n, workers, w);
                s.spawn(move || (lo..hi).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    blocks.into_iter().flatten().collect()
}

/// Like [`map_indexed`] but hands each worker its whole block together with
/// per-worker state built by `init`, for work that reuses scratch buffers.
pub fn map_blocks<T, E, S, I, F>(n: usize, workers: usize, init: I, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    I: Fn() -> Result<S, E> + Sync,
    F: Fn(&mut S, usize) -> Result<T, E> + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    let run = |lo: usize, hi: usize| -> Result<Vec<T>, E> {
        let mut state = init()?;
        (lo..hi).map(|i| f(&mut state, i)).collect()
    };
    if workers == 1 {
        return run(0, n);
    }
    let run = &run;
    let blocks: Vec<Result<Vec<T>, E>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (lo, hi) = shard_bounds(n, workers, w);
                s.spawn(move || run(lo, hi))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}
