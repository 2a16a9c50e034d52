//! Scoped worker threads for independent jobs such as MC-dropout passes.
//! Results are returned in job order, so output does not depend on the
//! thread count.

use std::num::NonZeroUsize;
use std::thread;

pub const THREADS_ENV: &str = "STVISIT_THREADS";

/// Worker cap from `STVISIT_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            thread::available_parallelism()
                .map(NonZeroUsize::get)
                .unwrap_or(1)
        })
}

/// Runs `job(i)` for `i in 0..n` on up to `threads` workers.
pub fn map_ordered<T, F>(n: usize, threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(job).collect();
    }
    let job = &job;
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(n.div_ceil(threads)).enumerate() {
            let base = w * n.div_ceil(threads);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(job(base + k));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}
