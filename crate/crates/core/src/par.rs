//! Data-parallel map with a sequential fallback when the `parallel` feature is off.
//!
//! Results are always returned in input order so both builds are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

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

/// Whether this build runs [`map_indexed`] on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
