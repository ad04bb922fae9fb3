//! Execution strategy for independent per-example work.
//!
//! Results are always returned in index order, so any reduction over them
//! is identical whichever executor produced them.

use alloc::vec::Vec;

pub trait Executor: Sync {
    fn map<T, Fun>(&self, n: usize, f: Fun) -> Vec<T>
    where
        T: Send,
        Fun: Fn(usize) -> T + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, Fun>(&self, n: usize, f: Fun) -> Vec<T>
    where
        T: Send,
        Fun: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
