//! Execution policy for the data-parallel kernels.
//!
//! Every parallel kernel splits work over disjoint output rows and computes
//! each row with the same sequential loop the fallback uses, so results are
//! bitwise identical whichever policy runs them. Floating-point reductions
//! are never split across threads.
//!
//! With the `parallel` feature disabled, [`Exec::Parallel`] silently runs
//! sequentially.

/// Below this many scalar multiply-adds a kernel stays on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
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

impl Exec {
    /// Whether a kernel of roughly `work` multiply-adds should fan out.
    #[inline]
    pub fn fans_out(self, work: usize) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel && work >= PAR_THRESHOLD
    }
}

/// Run `f(row_index, row)` over consecutive `row_len`-sized chunks of `out`.
pub fn for_each_row<T, F>(exec: Exec, work: usize, out: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.fans_out(work) {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = (exec, work);
    out.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Map `0..n` through `f`, preserving order.
pub fn map_range<R, F>(exec: Exec, work: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.fans_out(work) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = (exec, work);
    (0..n).map(f).collect()
}
