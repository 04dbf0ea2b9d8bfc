//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) these run on the current rayon
//! thread pool; without it they fall back to plain sequential iteration.
//! Both variants produce identical, input-ordered results, so thread count
//! never changes output values.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Bound the global worker pool. Must be called before any parallel work;
/// without the `parallel` feature this only logs, since everything runs
/// sequentially anyway.
pub fn set_threads(n: usize) -> crate::error::Result<()> {
    if n == 0 {
        return Err(crate::error::Error::config("thread count must be >= 1"));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crate::error::Error::config(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    {
        log::debug!("built without the parallel feature; --threads {n} ignored");
    }
    Ok(())
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over a slice, collecting results in input order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential versions, always available. The criterion bench suite uses
/// these as the baseline against the parallel paths above.
pub mod seq {
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
    where
        F: Fn(&I) -> T,
    {
        items.iter().map(f).collect()
    }
}
