//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel map in the crate goes through [`Execution::map_range`], so
//! results are always collected in index order and are identical whichever
//! policy is used.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is compiled in, otherwise
    /// behaves like `Sequential`.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..n` and collects in index order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fills `out` in place, chunk by chunk; `f` receives the chunk index.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
