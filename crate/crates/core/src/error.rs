use thiserror::Error;

use crate::grid::DyadicCube;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("no children: {0} is a leaf cube")]
    NoChildren(DyadicCube),

    #[error("bad generator parameter: {0}")]
    BadGeneratorParameter(String),

    #[error("degenerate weight on cube {0}")]
    DegenerateWeight(DyadicCube),

    #[error("invalid fractional order {alpha} (need 0 <= alpha < {dimension})")]
    InvalidFractionalOrder { alpha: f64, dimension: u32 },

    #[error("invalid exponents: {0}")]
    InvalidExponents(String),

    #[error("invalid entropy function: {0}")]
    InvalidEpsilon(String),

    #[error("{0}")]
    WrongEpsilonKind(&'static str),

    #[error("epsilon argument must be positive, got {0}")]
    EpsilonDomain(f64),

    #[error("family is not {lambda}-sparse: cube {witness} has ratio {ratio}")]
    NotSparse { lambda: f64, witness: DyadicCube, ratio: f64 },

    #[error("invalid sparse family: {0}")]
    InvalidFamily(String),

    #[error("cube {0} is not a member of the family")]
    NotInFamily(DyadicCube),

    #[error("power iteration did not converge after {iterations} iterations (last {last}, previous {previous})")]
    NonConvergence { iterations: usize, last: f64, previous: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
