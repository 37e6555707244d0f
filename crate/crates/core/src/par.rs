//! Deterministic data-parallel helpers.
//!
//! Work is split into fixed-size chunks whose boundaries never depend on the
//! number of worker threads, and partial results are combined in chunk order.
//! With the `parallel` feature the chunks run on the current rayon pool;
//! without it they run sequentially. Both produce bitwise-identical output.

/// Paths per work unit.
pub const CHUNK: usize = 2048;

/// Number of chunks covering `n` items.
pub fn chunk_count(n: usize) -> usize {
    n.div_ceil(CHUNK)
}

/// Item range covered by chunk `c`.
pub fn chunk_range(n: usize, c: usize) -> std::ops::Range<usize> {
    let lo = c * CHUNK;
    lo..(lo + CHUNK).min(n)
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps every chunk of `0..n` to a partial result, returned in chunk order.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    map_indexed(chunk_count(n), |c| f(chunk_range(n, c)))
}

/// Fills `out` (laid out as `n` records of `width` values) chunk by chunk.
pub fn fill_chunks<T, F>(out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(std::ops::Range<usize>, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    let n = out.len() / width;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(CHUNK * width)
            .enumerate()
            .for_each(|(c, slice)| f(chunk_range(n, c), slice));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(CHUNK * width)
            .enumerate()
            .for_each(|(c, slice)| f(chunk_range(n, c), slice));
    }
}

/// Sums `f(i)` over `0..n` with a thread-count independent summation order.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_chunks(n, |r| r.map(&f).sum::<f64>()).into_iter().sum()
}

/// Element-wise sum of fixed-length vectors produced per chunk.
pub fn sum_vectors<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    let partials = map_chunks(n, |r| {
        let mut acc = vec![0.0; len];
        f(r, &mut acc);
        acc
    });
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Runs `f` on a pool with `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        match threads {
            Some(n) if n >= 1 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(f),
                Err(_) => f(),
            },
            _ => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
