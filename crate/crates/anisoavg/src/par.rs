//! Data-parallel loops with a sequential fallback.
//!
//! With the default `parallel` feature these run on the global rayon pool;
//! without it they run as plain loops. Results are bit-identical either way:
//! every call site writes disjoint output slots in index order and no
//! floating-point reduction is reordered.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Builds a vector by evaluating `f` at `0..n`, preserving index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Applies `f` to every element of `items` with its index.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
    }
}

/// True when the `parallel` feature is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Caps the worker pool at `n` threads (0 keeps the default). The first
/// successful configuration wins; later calls in the same process are
/// ignored. A sequential build accepts any request and stays sequential.
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}
