use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corner {corner} lies behind the camera (depth {depth:.3} m)")]
    PointBehindCamera { corner: usize, depth: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    FactorizationFailed(&'static str),

    #[error("solver hit the iteration limit ({iterations}) with gradient norm {gradient_norm:e}")]
    MaxIterations { iterations: usize, gradient_norm: f64 },

    #[error("solver diverged: {0}")]
    Divergence(&'static str),

    #[error("jacobian does not have full column rank")]
    RankDeficientJacobian,

    #[error("{discarded} of {total} noise-sampled solves failed")]
    TooManyDiscarded { discarded: usize, total: usize },

    #[error("{divergent} of {total} transitions diverged")]
    DivergentTransitions { divergent: usize, total: usize },

    #[error("log-posterior or its gradient is not finite at the initial point")]
    NonFiniteGradient,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("eigendecomposition failed")]
    EigenFailure,

    #[error("no prediction records supplied")]
    EmptyRecords,

    #[error("innovation covariance is singular")]
    InnovationCovarianceSingular,

    #[error("{failed} of {total} trials failed")]
    TooManyFailedTrials { failed: usize, total: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
