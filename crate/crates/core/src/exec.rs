//! Data-parallel dispatch: rayon when the `parallel` feature is enabled
//! (the default), plain iteration otherwise. Results are collected in
//! input order, so outputs are identical across both modes.

#[cfg(feature = "parallel")]
pub(crate) fn maybe_par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn maybe_par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Install a global worker pool of the given size. Only effective in
/// builds with the `parallel` feature, and only before the pool's first
/// use; returns whether a pool was installed. Sequential builds always
/// return false and run on the calling thread.
pub fn configure_thread_pool(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
