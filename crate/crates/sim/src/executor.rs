use fedmac_core::federation::{ClientExecutor, ClientJob, ClientUpdate, FederationError, Sequential};
use rayon::prelude::*;

/// Trains a round's clients on a private rayon pool. Results keep job order,
/// and each client owns its parameters and seed stream, so the outcome does
/// not depend on the thread count.
pub struct ThreadPoolExecutor {
    pool: rayon::ThreadPool,
}

impl ThreadPoolExecutor {
    pub fn new(threads: usize) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
        Ok(Self { pool })
    }
}

impl ClientExecutor for ThreadPoolExecutor {
    fn run_all(&self, jobs: &[ClientJob<'_>]) -> Vec<Result<ClientUpdate, FederationError>> {
        self.pool.install(|| jobs.par_iter().map(ClientJob::run).collect())
    }
}

/// Sequential for one thread, a pool otherwise.
pub fn executor(threads: usize) -> Result<Box<dyn ClientExecutor>, crate::Error> {
    if threads <= 1 {
        return Ok(Box::new(Sequential));
    }
    ThreadPoolExecutor::new(threads)
        .map(|e| Box::new(e) as Box<dyn ClientExecutor>)
        .map_err(|e| crate::Error::Runtime(format!("thread pool: {e}")))
}
