//! Training, evaluation and the B versus B+I comparison.
//!
//! Every reduction over samples runs in a fixed order, so results do not
//! depend on the number of worker threads; [`with_workers`] bounds that
//! number.

pub mod bench;
pub mod config;
pub mod data;
mod train;

pub use bench::{concat_features, feature_bench, read_features, write_features, BenchConfig, BenchReport, Features};
pub use config::{Optimizer, RunConfig};
pub use data::{prepare, Dataset, ImageSource, SplitData};
pub use train::{
    calibrate_thresholds, compare_context_modes, epoch_order, evaluate, evaluate_predictions, grid_search, predict, train, train_from,
    write_grid, BatchInfo, ContextComparison, EpochLog, EvalReport, Grid, GridResult, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT,
    LOG_FILE,
};

use crate::error::{Error, Result};

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
