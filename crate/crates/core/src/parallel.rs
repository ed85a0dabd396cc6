//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the hot loops in this crate run on
//! rayon; without it they run sequentially. Every parallel loop writes to
//! disjoint output chunks and keeps a fixed per-element operation order, so
//! results are bit-identical in both modes. [`force_sequential`] switches the
//! dispatch at runtime, which is what the bench suite and the parity tests
//! use to compare the two paths inside one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution process-wide even when the `parallel` feature
/// is enabled. Safe to toggle at any time; affects subsequent calls only.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True when the next dispatched loop will run on rayon.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Below this element count the rayon dispatch overhead outweighs the work;
/// both paths compute identical values so the cutover is invisible.
const MIN_PARALLEL_ELEMS: usize = 4096;

/// Run `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() >= MIN_PARALLEL_ELEMS {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Run `f(i, &mut data[i])` for every element.
pub fn for_each_item<T, F>(data: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() >= MIN_PARALLEL_ELEMS {
        data.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
        return;
    }
    for (i, v) in data.iter_mut().enumerate() {
        f(i, v);
    }
}

/// Map `f` over `items`, in parallel when enabled. Results come back in
/// input order, so any later reduction is order-stable.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && items.len() > 1 {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
