//! Data-parallel helpers.
//!
//! Every helper computes independent outputs and collects them in index
//! order, so results are bit-identical between the rayon path and the
//! sequential fallback. Reductions are never split across threads.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Execution strategy for the helpers in this module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

/// Switch the process-wide execution strategy. Without the `parallel`
/// feature everything runs sequentially regardless.
pub fn set_execution(exec: Execution) {
    SEQUENTIAL.store(exec == Execution::Sequential, Ordering::SeqCst);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Size the global worker pool. Only the first call has any effect.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads.filter(|&n| n > 0) {
            builder = builder.num_threads(n);
        }
        let _ = builder.build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Fill `out` row by row, `row_len` values per row. `min_rows` bounds the
/// smallest unit of work handed to a worker.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, min_rows: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel && out.len() / row_len > min_rows {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .with_min_len(min_rows.max(1))
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = min_rows;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Ordered map over `0..n`.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
