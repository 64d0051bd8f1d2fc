use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("incident face normals of vertex {vertex} cancel out")]
    DegenerateNormal { vertex: usize },

    #[error("homogeneous coordinates are rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("k-nearest-neighbour graph has {components} connected components")]
    DisconnectedGraph { components: usize },

    #[error("{unreachable} vertices are unreachable from vertex {from}")]
    DisconnectedComponent { from: usize, unreachable: usize },

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("spectrum too small: need at least {needed} eigenpairs, got {got}")]
    InsufficientSpectrum { needed: usize, got: usize },

    #[error("orientation features require a triangle mesh")]
    PointCloudUnsupported,

    #[error("full matching needs equal keypoint counts, got {source_count} and {target_count}")]
    KeypointCountMismatch {
        source_count: usize,
        target_count: usize,
    },

    #[error("infeasible assignment: {0}")]
    InfeasibleAssignment(String),

    #[error("candidate sets admit no feasible complete assignment")]
    NoFeasibleCompletion,

    #[error("instance too large for exhaustive enumeration (more than {limit} assignments)")]
    TooLarge { limit: u64 },

    #[error("ground truth missing for source keypoint {0}")]
    MissingGroundTruth(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
