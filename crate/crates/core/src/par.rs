//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon; without
//! it they run plain loops. Every helper assigns each output slot to exactly
//! one task and leaves reductions to the caller in a fixed order, so results
//! are bitwise identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when the crate was built with the rayon backend.
pub fn parallelism_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Computes `f(i)` for `i in 0..n`, preserving order.
pub(crate) fn par_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f(i, row)` over consecutive `row_len` chunks of `data`.
pub(crate) fn par_rows_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(row_len > 0 && data.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in data.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
    }
}

/// Evaluates `f` on fixed-size index blocks of `0..n` and returns the block
/// results in order. Block size is a constant of the call site, never the
/// thread count, so the reduction tree is stable.
pub(crate) fn par_map_blocks<T, F>(n: usize, block: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    assert!(block > 0);
    let nblocks = n.div_ceil(block);
    par_collect(nblocks, |b| {
        let start = b * block;
        f(start..(start + block).min(n))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collect_preserves_order() {
        let v = par_collect(100, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn rows_mut_touches_every_row() {
        let mut data = vec![0.0; 12];
        par_rows_mut(&mut data, 3, |i, row| {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (i * 3 + j) as f64;
            }
        });
        assert_eq!(data, (0..12).map(|x| x as f64).collect::<Vec<_>>());
    }

    #[test]
    fn block_sums_are_deterministic() {
        let total: f64 = par_map_blocks(1000, 64, |r| r.map(|i| (i as f64).sqrt()).sum::<f64>())
            .into_iter()
            .sum();
        let seq: f64 = par_map_blocks(1000, 64, |r| r.map(|i| (i as f64).sqrt()).sum::<f64>())
            .into_iter()
            .sum();
        assert_eq!(total.to_bits(), seq.to_bits());
    }
}
