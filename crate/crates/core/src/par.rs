//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions split the index range into fixed-size chunks, sum each chunk
//! left to right, then fold the chunk totals in chunk order. The grouping is
//! independent of thread count and of [`Execution`], so parallel and sequential
//! runs are bit-identical.

use crate::error::Result;
use crate::params::ParamSet;

/// Samples per reduction chunk.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs sequentially.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Sums `f(i)` over `0..n` with the fixed chunked grouping described above.
/// Returns `Ok(None)` when `n == 0`.
pub fn sum_param_sets<F>(exec: Execution, n: usize, f: F) -> Result<Option<ParamSet>>
where
    F: Fn(usize) -> Result<ParamSet> + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partials = map_indexed(exec, chunks, |c| -> Result<ParamSet> {
        let start = c * CHUNK;
        let end = (start + CHUNK).min(n);
        let mut acc = f(start)?;
        for i in start + 1..end {
            acc.add_assign(&f(i)?)?;
        }
        Ok(acc)
    });
    let mut total: Option<ParamSet> = None;
    for p in partials {
        let p = p?;
        match total.as_mut() {
            Some(t) => t.add_assign(&p)?,
            None => total = Some(p),
        }
    }
    Ok(total)
}
