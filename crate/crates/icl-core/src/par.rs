//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (the default) work fans out over rayon's
//! current thread pool; without it the same code runs on one thread. Results
//! come back in input order either way, so callers are schedule-independent
//! and reports stay byte-identical across worker counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept available for benchmarks that compare the
/// two paths in one binary.
pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Cap the global worker pool. Call once, before any parallel work; later
/// calls fail quietly because the pool is already running.
#[cfg(feature = "parallel")]
pub fn configure_workers(workers: usize) {
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build_global();
    if let Err(e) = result {
        log::debug!("worker pool already initialized: {e}");
    }
}

/// Without the `parallel` feature there is exactly one worker.
#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_workers: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..500).collect();
        let doubled = map_ordered(&items, |&x| x * 2);
        let sequential = map_ordered_seq(&items, |&x| x * 2);
        assert_eq!(doubled, sequential);
        assert_eq!(doubled[7], 14);
    }
}
