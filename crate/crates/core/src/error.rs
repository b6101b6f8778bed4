use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("matrix is not of p-block shape: diagonal blocks have norm {norm:e}")]
    BlockShape { norm: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("point {point:?} lies outside the tabulated domain")]
    OutsideDomain { point: Vec<f64> },
    #[error("grid too small for finite-difference stencils: {0}")]
    GridTooSmall(String),
    #[error("frame drift budget exceeded: form residual {residual:e} at node {node}")]
    DriftExceeded { residual: f64, node: usize },
    #[error("spectral value {lambda} is within {distance:e} of a pole at +/-{alpha}")]
    PoleProximity { lambda: String, alpha: String, distance: f64 },
    #[error("spectral value {0} is not present in the frame sheet")]
    MissingLambda(String),
    #[error("Y extraction cross-check failed: method A vs B discrepancy {0:e}")]
    YCrossCheck(f64),
    #[error("invalid simple element: {0}")]
    InvalidElement(String),
    #[error("invalid null basis: {0}")]
    InvalidBasis(String),
    #[error("degenerate at {at}: {reason}")]
    Degenerate { at: String, reason: String },
    #[error("rank deficiency: metric fields have singular-value ratio {ratio:e} at node {node}")]
    RankDeficient { node: usize, ratio: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty domain intersection")]
    EmptyDomain,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
