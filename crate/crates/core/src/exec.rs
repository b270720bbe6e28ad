//! Data-parallel map over independent work items.
//!
//! Replications, grid points and finite-difference columns all go through
//! [`map_indexed`]. Output order always follows the index, so results do not
//! depend on scheduling. Without the `parallel` feature every call runs
//! sequentially.

/// How independent work items are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// True when the crate was built with rayon support.
pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
