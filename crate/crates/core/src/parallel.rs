//! Deterministic data parallelism.
//!
//! All parallel reductions in this crate go through fixed-size chunks whose
//! partial results are merged in chunk order, so outputs are bit-identical
//! for any rayon worker count.

use std::ops::Range;

use rayon::prelude::*;

/// Chunk granularity for parallel reductions. Fixed: changing it changes
/// f.p. summation order and therefore the bit-level output contract.
pub const CHUNK: usize = 1024;

/// Apply `f` to each fixed-size index chunk in parallel; partial results come
/// back in chunk order.
pub fn chunk_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges: Vec<Range<usize>> = (0..n)
        .step_by(CHUNK)
        .map(|start| start..(start + CHUNK).min(n))
        .collect();
    ranges.into_par_iter().map(f).collect()
}

/// Parallel per-element map with order-preserving collection.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
