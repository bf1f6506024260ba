//! Deterministic batch execution.
//!
//! Batch reductions are computed as ordered partial sums over fixed-size
//! chunks. The parallel path distributes whole chunks and combines the
//! per-chunk results in index order, so it is bit-identical to the
//! sequential fallback for any thread count. Toggling the `parallel`
//! feature therefore never changes a numeric result, only wall-clock time.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of items accumulated per partial sum.
pub const CHUNK: usize = 64;

/// Maps `f` over `0..n` and collects results in index order.
pub fn map_collect_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Parallel twin of [`map_collect_seq`]; identical output.
#[cfg(feature = "parallel")]
pub fn map_collect_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_collect_seq(n, f)
}

/// Maps `f` over `0..n` using the configured execution mode.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_collect_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_collect_seq(n, f)
    }
}

fn chunk_sum<F>(start: usize, end: usize, f: &F) -> f64
where
    F: Fn(usize) -> f64,
{
    let mut acc = 0.0;
    for i in start..end {
        acc += f(i);
    }
    acc
}

/// Sums `f(i)` for `i in 0..n` via ordered fixed-size partial sums.
pub fn sum_by_seq<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        total += chunk_sum(start, end, &f);
        start = end;
    }
    total
}

/// Parallel twin of [`sum_by_seq`]; identical output.
#[cfg(feature = "parallel")]
pub fn sum_by_par<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_sum(c * CHUNK, ((c + 1) * CHUNK).min(n), &f))
        .collect();
    // Explicit fold from +0.0: empty `Iterator::sum` yields -0.0, which
    // would differ bitwise from the sequential path.
    let mut total = 0.0;
    for p in &partials {
        total += p;
    }
    total
}

#[cfg(not(feature = "parallel"))]
pub fn sum_by_par<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    sum_by_seq(n, f)
}

/// Sums `f(i)` for `i in 0..n` using the configured execution mode.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        sum_by_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sum_by_seq(n, f)
    }
}

fn chunk_sum_vec<F>(start: usize, end: usize, dim: usize, f: &F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]),
{
    let mut acc = vec![0.0; dim];
    for i in start..end {
        f(i, &mut acc);
    }
    acc
}

fn add_assign(acc: &mut [f64], part: &[f64]) {
    for (a, p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

/// Accumulates `f(i, acc)` over `i in 0..n` into a `dim`-vector via ordered
/// fixed-size partial sums. `f` must only add into `acc`.
pub fn sum_vec_by_seq<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut total = vec![0.0; dim];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let part = chunk_sum_vec(start, end, dim, &f);
        add_assign(&mut total, &part);
        start = end;
    }
    total
}

/// Parallel twin of [`sum_vec_by_seq`]; identical output.
#[cfg(feature = "parallel")]
pub fn sum_vec_by_par<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk_sum_vec(c * CHUNK, ((c + 1) * CHUNK).min(n), dim, &f))
        .collect();
    let mut total = vec![0.0; dim];
    for part in &partials {
        add_assign(&mut total, part);
    }
    total
}

#[cfg(not(feature = "parallel"))]
pub fn sum_vec_by_par<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    sum_vec_by_seq(n, dim, f)
}

/// Vector accumulation using the configured execution mode.
pub fn sum_vec_by<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        sum_vec_by_par(n, dim, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sum_vec_by_seq(n, dim, f)
    }
}
