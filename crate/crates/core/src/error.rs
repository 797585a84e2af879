use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata table {path}: {msg}")]
    Metadata { path: PathBuf, msg: String },
    #[error("duplicate session for patient {patient} at week {week}")]
    DuplicateSession { patient: String, week: i64 },
    #[error("empty cohort")]
    EmptyCohort,
    #[error("nifti error in {path}: {msg}")]
    Nifti { path: PathBuf, msg: String },
    #[error("missing orientation metadata in {0}")]
    MissingOrientation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("z-score undefined: {0}")]
    ConstantVolume(String),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error("degenerate sampler: {0}")]
    DegenerateSampler(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("sample {sample}: {msg}")]
    Sample { sample: String, msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("non-finite loss at epoch {epoch} (lr {lr:e}, batch {batch:?})")]
    NonFiniteLoss {
        epoch: usize,
        lr: f64,
        batch: Vec<String>,
    },
    #[error("layer `{layer}` has no spatial extent; valid layers: {valid:?}")]
    NonSpatialLayer { layer: String, valid: Vec<String> },
    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),
    #[error("config: {0}")]
    Config(String),
    #[error("interrupted: {0}")]
    Interrupted(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
