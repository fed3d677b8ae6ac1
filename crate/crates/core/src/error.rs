use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a RIFF/WAVE file: {0}")]
    NotWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("signal too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank deficient slab {slab}: {floored} of {dim} eigenvalues hit the floor")]
    RankDeficient { slab: usize, floored: usize, dim: usize },

    #[error("singular SCV covariance for component {component}")]
    SingularCovariance { component: usize },

    #[error("singular demixing matrix in dataset {dataset} (|det| = {abs_det:e})")]
    SingularDemixing { dataset: usize, abs_det: f64 },

    #[error("degenerate nullspace for row {row} of dataset {dataset}")]
    DegenerateNullspace { row: usize, dataset: usize },

    #[error("IVA failed at iteration {iteration}: {source}")]
    IvaIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("kernel extent {extent} exceeds input height {height}")]
    KernelTooLarge { extent: usize, height: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("bad tensor file {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("dataset preparation failed for {failed} of {total} files; first error: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
}
