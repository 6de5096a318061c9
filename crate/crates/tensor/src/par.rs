//! Batch-level data parallelism.
//!
//! With the `parallel` feature (on by default) work items run on the rayon
//! pool; without it they run in order on the calling thread. Results always
//! come back in input order, so any reduction performed over them afterwards
//! is bit-identical between the two builds and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Map `f` over `items`, in parallel when the feature is enabled.
pub fn map<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// The sequential path, always available (benchmarks compare it with [`map`]).
pub fn map_sequential<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    F: Fn(&I) -> R,
{
    items.iter().map(f).collect()
}

/// Apply `f` to every element in place.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}

/// Fallible [`for_each_mut`]; every item is visited and the first error in
/// index order is returned.
pub fn try_for_each_mut<T, E, F>(items: &mut [T], f: F) -> Result<(), E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut T) -> Result<(), E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(), E>> = items
        .par_iter_mut()
        .enumerate()
        .map(|(i, t)| f(i, t))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(), E>> = items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect();
    results.into_iter().collect()
}
