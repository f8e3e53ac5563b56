//! Sequential / rayon dispatch for the data-parallel loops.

/// How data-parallel loops are executed.
///
/// Both modes produce identical results: parallel loops only ever write to
/// disjoint outputs, and every cross-item reduction is performed afterwards
/// in index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Evaluate `f` for every index in `0..n`, collecting results in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }

    /// Visit fixed-width rows of `data` mutably, passing the row index.
    pub fn for_each_row<F>(self, data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        match self {
            Execution::Sequential => data
                .chunks_mut(width)
                .enumerate()
                .for_each(|(r, row)| f(r, row)),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                data.par_chunks_mut(width)
                    .enumerate()
                    .for_each(|(r, row)| f(r, row))
            }
        }
    }

    pub fn is_parallel(self) -> bool {
        self != Execution::Sequential
    }
}

/// Size the global worker pool. Must run before any parallel work; returns
/// false if the pool was already built or the feature is off.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}
