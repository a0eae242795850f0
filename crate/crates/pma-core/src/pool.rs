//! Shared worker pool for refresh fan-out and ablation cells.
//!
//! PMA_THREADS caps the worker count; unset means one worker per available
//! CPU. Work items are independently seeded and collected in order, so the
//! thread count never changes results.

use std::sync::OnceLock;

static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("PMA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n.min(available),
            _ => available,
        },
        Err(_) => available,
    }
}

pub fn worker_pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(worker_count())
            .build()
            .expect("worker pool")
    })
}
