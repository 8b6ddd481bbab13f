//! Worker-pool control for data-parallel kernels.
//!
//! Each output element is always produced by exactly one task with a fixed
//! internal reduction order, so results are bitwise identical at every worker
//! count. Parallelism only changes which thread computes which rows.

use std::sync::{Arc, RwLock};

use rayon::prelude::*;

static POOL: RwLock<Option<Arc<rayon::ThreadPool>>> = RwLock::new(None);

/// Minimum per-dispatch work (in fused multiply-add units) before a kernel
/// bothers splitting rows across the pool.
pub(crate) const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Sets the number of worker threads used inside kernels. `n <= 1` runs
/// everything on the calling thread.
pub fn set_workers(n: usize) {
    let mut guard = POOL.write().unwrap();
    if n <= 1 {
        *guard = None;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool");
        *guard = Some(Arc::new(pool));
    }
}

/// Currently configured worker count (1 when serial).
pub fn workers() -> usize {
    POOL.read()
        .unwrap()
        .as_ref()
        .map(|p| p.current_num_threads())
        .unwrap_or(1)
}

fn current_pool() -> Option<Arc<rayon::ThreadPool>> {
    POOL.read().unwrap().clone()
}

/// Runs `f(row_index, row_slice)` over `out` split into rows of `row_len`,
/// in parallel when a pool is installed and the work is worth it.
pub(crate) fn par_rows<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    let rows = out.len() / row_len;
    let pool = current_pool();
    let worth_it = rows > 1 && rows * work_per_row >= MIN_PARALLEL_WORK;
    match pool {
        Some(pool) if worth_it => pool.install(|| {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
        }),
        _ => {
            for (i, row) in out.chunks_mut(row_len).enumerate() {
                f(i, row);
            }
        }
    }
}

/// Maps `f` over indices 0..n collecting results in index order, in parallel
/// when a pool is installed. Used for independent batch elements.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    match current_pool() {
        Some(pool) if n > 1 => pool.install(|| (0..n).into_par_iter().map(|i| f(i)).collect()),
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_split_matches_serial() {
        let mut a = vec![0.0f64; 64 * 64];
        let mut b = a.clone();
        set_workers(1);
        par_rows(&mut a, 64, usize::MAX / 128, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 31 + j) as f64 * 0.5;
            }
        });
        set_workers(4);
        par_rows(&mut b, 64, usize::MAX / 128, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 31 + j) as f64 * 0.5;
            }
        });
        set_workers(1);
        assert_eq!(a, b);
    }
}
