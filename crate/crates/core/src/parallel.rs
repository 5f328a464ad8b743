use alloc::vec::Vec;

/// Evaluates `f(i)` for `i in 0..n`, in index order. With the `std` feature
/// the work is spread over the current rayon pool; the output vector is the
/// same either way.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        (0..n).map(f).collect()
    }
}
