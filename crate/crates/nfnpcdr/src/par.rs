//! Order-preserving task maps: a rayon-backed version behind the `parallel`
//! feature and a sequential version that is always available (the benchmark
//! compares the two on identical inputs).

/// Sequential map, kept unconditionally so results can be compared against
/// the parallel path.
pub fn map_sequential<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_items<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    map_sequential(items, f)
}
