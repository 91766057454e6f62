//! Error type shared by all solver modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model parameters or grid definition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two objects were combined that live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A kernel or covariance input was not symmetric.
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    /// The backward weight solve produced a non-positive interior value,
    /// which signals a domain that is too small or a time step too coarse.
    #[error(
        "non-positive weight function {value:e} at time index {time_index}, \
         space index {space_index}; enlarge the domain or refine the time step"
    )]
    NonPositiveWeight {
        time_index: usize,
        space_index: usize,
        value: f64,
    },

    /// The weight at the starting point fell below the masking floor, so the
    /// sample weight is undefined.
    #[error("weight function at the start point is below the floor {floor:e}")]
    WeightUnderflow { floor: f64 },

    /// Forward density propagation lost or gained too much mass.
    #[error("density mass drifted by {error:e} at step {step} (limit {limit:e})")]
    MassDrift { step: usize, error: f64, limit: f64 },

    /// All importance weights of a population vanished.
    #[error("all population weights are zero")]
    WeightCollapse,

    /// A quadratic model whose curvature matrix is not positive definite has
    /// unbounded cost and is refused.
    #[error("quadratic curvature matrix is not positive definite")]
    NotPositiveDefinite,

    /// Too many disorder instances were refused during a quenched average.
    #[error("{refused} of {attempted} disorder instances refused (limit 20%)")]
    TooManyRefusals { refused: usize, attempted: usize },

    /// Every Monte Carlo path weight underflowed to zero.
    #[error("all path weights underflowed; reduce the horizon or the agent count")]
    PathWeightUnderflow,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed kernel or grid file.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}
