//! Data-parallel helpers.
//!
//! Every hot loop in the crate goes through these functions so that the
//! `parallel` feature (rayon) can be switched off for a purely sequential
//! build. Callers that want to compare both paths at runtime pass an explicit
//! [`Parallelism`]; everything else uses [`Parallelism::default()`].
//!
//! Only element-wise maps are parallelized. Floating point reductions always
//! run sequentially over collected results so outputs are bitwise identical
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Rayon,
}

impl Parallelism {
    /// All modes compiled into this build.
    pub fn available() -> Vec<Parallelism> {
        #[cfg(feature = "parallel")]
        {
            vec![Parallelism::Sequential, Parallelism::Rayon]
        }
        #[cfg(not(feature = "parallel"))]
        {
            vec![Parallelism::Sequential]
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Parallelism::Sequential => "sequential",
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => "rayon",
        }
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
    }
}

/// Calls `f(chunk_index, chunk)` on consecutive mutable chunks of `data`.
pub fn for_each_chunk_mut<T, F>(mode: Parallelism, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    match mode {
        Parallelism::Sequential => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}
