//! Thread-pool executor for per-example work.

use onellm_core::exec::Executor;
use rayon::prelude::*;

/// Environment variable capping worker threads.
pub const THREADS_VAR: &str = "ONEREPO_THREADS";

/// Runs work on a dedicated rayon pool. Results come back in index order,
/// so reductions match the sequential executor bit for bit.
pub struct PoolExecutor {
    pool: rayon::ThreadPool,
}

impl PoolExecutor {
    pub fn new(threads: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("thread pool");
        Self { pool }
    }

    /// Sized by `ONEREPO_THREADS`, else by the available parallelism.
    pub fn from_env() -> Self {
        let n = std::env::var(THREADS_VAR)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Self::new(n)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for PoolExecutor {
    fn map<T, Fun>(&self, n: usize, f: Fun) -> Vec<T>
    where
        T: Send,
        Fun: Fn(usize) -> T + Sync + Send,
    {
        if self.threads() == 1 {
            return (0..n).map(f).collect();
        }
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
