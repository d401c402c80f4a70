//! Data-parallel helpers with a sequential fallback.
//!
//! Every call site is shaped so the parallel and sequential paths produce
//! bitwise-identical output: each output element is computed independently
//! and written to its own slot, with no cross-element reductions whose
//! float ordering could drift.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, collecting results in input order.
#[cfg(feature = "parallel")]
pub fn map_collect<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Map over an index range, collecting results in order.
#[cfg(feature = "parallel")]
pub fn map_range<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F: Fn(usize) -> U>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// Map with an explicit cap on how many items run at once.
///
/// Used for outbound HTTP calls where the bound is a politeness limit,
/// not a core count.
pub fn map_bounded<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(
    items: &[T],
    bound: usize,
    f: F,
) -> Vec<U> {
    let bound = bound.max(1);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(bound) {
        out.extend(map_collect(chunk, &f));
    }
    out
}
