//! Mechanism-level experiments on trained toy models: vocabulary
//! distribution density, embedding pruning, PCA of the text table, noise
//! robustness, runtime, and the connector comparison harness.

mod bench;
mod compare;
mod distribution;
mod noise;
mod pca;
pub mod report;

use thiserror::Error;

use crate::model::ModelError;
use crate::tensor::TensorError;

pub use bench::{bench_connectors, BenchConfig, BenchReport, BenchRow, BenchScope};
pub use compare::{compare_connectors, ComparisonConfig, ComparisonRow, GapRow};
pub use distribution::{aggregate_distribution, eval_pruned, prune_embeddings, MeanVocabDistribution, PruneReport};
pub use noise::{cosine_distance, noise_test, NoiseReport, NoiseRow};
pub use pca::{pca_2d, PcaResult};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("timer resolution insufficient: {0}; increase the batch and retry")]
    TimerResolution(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl AnalysisError {
    pub fn is_numeric(&self) -> bool {
        match self {
            AnalysisError::Model(e) => e.is_numeric(),
            AnalysisError::Tensor(TensorError::NonFinite { .. }) => true,
            _ => false,
        }
    }
}

/// Runs `f` on a pool of `workers` threads, or inline for `workers <= 1`.
pub(crate) fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, AnalysisError> {
    if workers <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| AnalysisError::Input(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
