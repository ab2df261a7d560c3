//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper partitions work by output element, and any reduction is
//! done afterwards in index order, so results are bit-identical whichever
//! [`Exec`] is selected.

/// Execution strategy for the batch-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing; behaves as `Sequential` when the `parallel`
    /// feature is disabled.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(exec: Exec, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_strategies_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(
            map_range(Exec::Sequential, 1000, f),
            map_range(Exec::Parallel, 1000, f)
        );

        let mut a = vec![0usize; 103];
        let mut b = a.clone();
        let fill = |ci: usize, c: &mut [usize]| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = ci * 10 + j;
            }
        };
        for_each_chunk(Exec::Sequential, &mut a, 10, fill);
        for_each_chunk(Exec::Parallel, &mut b, 10, fill);
        assert_eq!(a, b);
        assert_eq!(a[102], 102);
    }
}
