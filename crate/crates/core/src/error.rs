use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShfError {
    #[error("orbit is not elliptic (eccentricity {eccentricity})")]
    NonElliptic { eccentricity: f64 },
    #[error("retrograde equatorial singularity (inclination within 1e-9 rad of pi)")]
    RetrogradeSingularity,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("propagation failed at epoch {last_epoch} s: {reason}")]
    Propagation { last_epoch: f64, reason: String },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("centroid search failed: {0}")]
    CentroidFailure(String),
    #[error("degenerate measurement update: all likelihoods vanish")]
    DegenerateUpdate,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rank-deficient normal matrix in least-squares fit")]
    RankDeficient,
    #[error("station-keeping planning failed: {0}")]
    Planning(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl ShfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ShfError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = ShfError> = std::result::Result<T, E>;
