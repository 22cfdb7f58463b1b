//! Deterministic fan-out helpers.
//!
//! Work is split into tasks whose count is fixed by the caller, never by the
//! number of threads. Results come back in task order and every reduction
//! is done sequentially over that order.

use rayon::prelude::*;

pub fn map_tasks<T, F>(tasks: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..tasks).into_par_iter().map(f).collect()
}

/// Runs `f` on a dedicated pool with `workers` threads.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
