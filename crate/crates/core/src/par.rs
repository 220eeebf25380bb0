//! Thin switch between rayon and sequential execution.
//!
//! The crate is data-parallel in its inner loops (WDVV relation sweeps,
//! per-column solves, term-block maps). With the default `parallel` feature
//! these run on rayon; without it the same call sites degrade to plain
//! iterators. `map_maybe_par` takes an explicit flag so benchmarks can
//! compare both paths in one build.

#[cfg(feature = "parallel")]
pub fn map_collect<I, T, F, R>(items: I, f: F) -> Vec<R>
where
    I: IntoIterator<Item = T>,
    T: Send,
    F: Fn(T) -> R + Sync + Send,
    R: Send,
{
    use rayon::prelude::*;
    let v: Vec<T> = items.into_iter().collect();
    v.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<I, T, F, R>(items: I, f: F) -> Vec<R>
where
    I: IntoIterator<Item = T>,
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Runs with rayon only when both the feature and the flag ask for it.
pub fn map_maybe_par<T, F, R>(parallel: bool, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    F: Fn(T) -> R + Sync + Send,
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return items.into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.into_iter().map(f).collect()
}
