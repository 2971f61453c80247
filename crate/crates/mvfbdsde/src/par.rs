//! Chunked data-parallel helpers.
//!
//! Work is cut into fixed-size chunks whose boundaries do not depend on the
//! thread count, and partial results are combined in chunk order. Parallel
//! and sequential builds therefore produce bit-identical floating point.

pub const CHUNK: usize = 256;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map every chunk `[start, end)` of `0..n` and return the results in order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let chunks = n.div_ceil(chunk.max(1));
    let run = |c: usize| {
        let start = c * chunk;
        f(start, (start + chunk).min(n))
    };
    #[cfg(feature = "parallel")]
    {
        (0..chunks).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(run).collect()
    }
}

/// Apply `f(index, row)` to each `width`-sized row of `data`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width * CHUNK)
            .enumerate()
            .for_each(|(c, block)| {
                for (i, row) in block.chunks_mut(width).enumerate() {
                    f(c * CHUNK + i, row);
                }
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in data.chunks_mut(width).enumerate() {
            f(i, row);
        }
    }
}

/// Deterministic sum of per-index vectors of length `width`.
pub fn sum_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let partials = map_chunks(n, CHUNK, |a, b| {
        let mut acc = vec![0.0; width];
        for i in a..b {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_is_exact_for_integers() {
        let s = sum_rows(1000, 2, |i, acc| {
            acc[0] += i as f64;
            acc[1] += 1.0;
        });
        assert_eq!(s, vec![499_500.0, 1000.0]);
    }

    #[test]
    fn rows_visited_once_with_global_index() {
        let mut data = vec![0.0; 3 * 700];
        for_each_row(&mut data, 3, |i, row| row.fill(i as f64));
        for (i, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn map_chunks_preserves_order() {
        let v = map_chunks(1000, 300, |a, b| (a, b));
        assert_eq!(v, vec![(0, 300), (300, 600), (600, 900), (900, 1000)]);
    }
}
