use thiserror::Error;

/// Errors raised by the estimation pipeline. Each variant maps to a stable
/// upper-case code (see [`AuctionError::code`]) used in reports and CLI output.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuctionError {
    #[error("row {row}: {message}")]
    Load { row: usize, message: String },

    #[error("auction {auction_id} has I={count} < 2")]
    TooFewBids { auction_id: String, count: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("no auctions with I={0}")]
    EmptyGroup(usize),

    #[error("degenerate scale for {0}: sample standard deviation is zero")]
    DegenerateScale(String),

    #[error("unsupported covariate dimension d={0}")]
    UnsupportedDimension(usize),

    #[error("weighted design matrix is singular at center {center:?}")]
    SingularDesign { center: Vec<f64> },

    #[error("quadrature did not reach tolerance {tol:e} on [{a}, {b}]")]
    QuadratureFail { a: f64, b: f64, tol: f64 },

    #[error("non-finite moment at auction {auction}, bidder {bidder}")]
    NonfiniteMoment { auction: usize, bidder: usize },

    #[error("unknown model '{name}'; available: {available}")]
    UnknownModel { name: String, available: String },

    #[error("model '{name}' failed its self-test: {message}")]
    ModelSelfTest { name: String, message: String },

    #[error("model '{name}' requires d={expected}, dataset has d={actual}")]
    ModelDimension {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("weighting matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("CᵀΩC is singular; parameters are not identified in-sample")]
    SingularJacobian,

    #[error("GMM did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("all observations were trimmed")]
    AllTrimmed,

    #[error("evaluation grid is empty")]
    EmptyGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),
}

impl AuctionError {
    pub fn code(&self) -> &'static str {
        match self {
            AuctionError::Load { .. } => "LOAD_ERROR",
            AuctionError::TooFewBids { .. } => "TOO_FEW_BIDS",
            AuctionError::InvalidDataset(_) => "INVALID_DATASET",
            AuctionError::EmptyGroup(_) => "EMPTY_GROUP",
            AuctionError::DegenerateScale(_) => "DEGENERATE_SCALE",
            AuctionError::UnsupportedDimension(_) => "UNSUPPORTED_DIMENSION",
            AuctionError::SingularDesign { .. } => "SINGULAR_DESIGN",
            AuctionError::QuadratureFail { .. } => "QUADRATURE_FAIL",
            AuctionError::NonfiniteMoment { .. } => "NONFINITE_MOMENT",
            AuctionError::UnknownModel { .. } => "UNKNOWN_MODEL",
            AuctionError::ModelSelfTest { .. } => "MODEL_SELF_TEST",
            AuctionError::ModelDimension { .. } => "MODEL_DIMENSION",
            AuctionError::NotPositiveDefinite => "NOT_POSITIVE_DEFINITE",
            AuctionError::SingularJacobian => "SINGULAR_JACOBIAN",
            AuctionError::NotConverged { .. } => "NOT_CONVERGED",
            AuctionError::AllTrimmed => "ALL_TRIMMED",
            AuctionError::EmptyGrid => "EMPTY_GRID",
            AuctionError::InvalidArgument(_) => "INVALID_ARGUMENT",
            AuctionError::Io(_) => "IO_ERROR",
        }
    }
}

impl From<std::io::Error> for AuctionError {
    fn from(e: std::io::Error) -> Self {
        AuctionError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AuctionError>;
