//! Chunked data parallelism.
//!
//! Work is split into fixed-size chunks and the per-chunk results are
//! returned in chunk order, so reductions performed by the caller are
//! bit-identical whether the chunks run on a rayon pool or sequentially
//! (the `parallel` feature switched off). Flops charged by a chunk are moved
//! to the calling thread's meter, wherever the chunk ran.

use crate::numerics::flops;

/// Runs `f` and takes back the flops it charged on the current thread.
fn metered<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let (r, n) = flops::measure(f);
    flops::charge(n.wrapping_neg());
    (r, n)
}

fn settle<R>(parts: Vec<(R, u64)>) -> Vec<R> {
    let mut total = 0u64;
    let out = parts
        .into_iter()
        .map(|(r, n)| {
            total = total.wrapping_add(n);
            r
        })
        .collect();
    flops::charge(total);
    out
}

/// Rows per chunk for batch evaluation.
pub const CHUNK_ROWS: usize = 256;

/// Applies `f(chunk_index, start, end)` over `[0, len)` in chunks of `chunk`.
pub fn map_chunks<R, F>(len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize, usize) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = len.div_ceil(chunk);
    let run = |c: usize| {
        let start = c * chunk;
        metered(|| f(c, start, (start + chunk).min(len)))
    };
    #[cfg(feature = "parallel")]
    let parts = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts = (0..count).map(run).collect();
    settle(parts)
}

/// Fallible variant of [`map_chunks`]; returns the first error in chunk order.
pub fn try_map_chunks<R, E, F>(len: usize, chunk: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize, usize, usize) -> Result<R, E> + Sync + Send,
{
    map_chunks(len, chunk, f).into_iter().collect()
}

/// Parallel map over a slice, preserving order.
pub fn map_items<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let parts = {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| metered(|| f(i, x))).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts = items.iter().enumerate().map(|(i, x)| metered(|| f(i, x))).collect();
    settle(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let spans = map_chunks(10, 4, |c, s, e| (c, s, e));
        assert_eq!(spans, vec![(0, 0, 4), (1, 4, 8), (2, 8, 10)]);
        assert!(map_chunks(0, 4, |c, _, _| c).is_empty());
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> = try_map_chunks(10, 2, |c, _, _| if c >= 2 { Err(c) } else { Ok(c) });
        assert_eq!(r, Err(2));
    }

    #[test]
    fn chunk_flops_reach_the_caller() {
        let (_, n) = flops::measure(|| map_chunks(1000, 7, |_, s, e| flops::charge((e - s) as u64)));
        assert_eq!(n, 1000);
        let (_, n) = flops::measure(|| map_items(&[1u64, 2, 3], |_, &x| flops::charge(x)));
        assert_eq!(n, 6);
    }
}
