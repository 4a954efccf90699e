use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("{points} points but {covariances} covariances")]
    LengthMismatch { points: usize, covariances: usize },
    #[error("covariance {index} is not symmetric positive-definite")]
    NotSpd { index: usize },
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("fixed cloud has zero radius (all points coincide)")]
    ZeroRadius,
    #[error("matrix is not a proper rotation (orthonormality residual {residual:e})")]
    NotOrthonormal { residual: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("too few points remain ({remaining}, need at least {required})")]
    TooFewPoints { remaining: usize, required: usize },
    #[error("correspondence set is degenerate (cross-covariance rank {rank})")]
    DegenerateCorrespondences { rank: usize },
    #[error("dataset is empty")]
    EmptyDataset,
}
