//! Crate-wide error type.

/// Errors surfaced by the simulator and analysis operations.
///
/// Numeric payloads are stored as `f64` regardless of the scalar type the
/// computation ran in, so the error type stays non-generic.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("the subgraph induced by the honest agents is disconnected")]
    DisconnectedHonestSubgraph,

    #[error("spectral gap beta = {0} lies outside (0, 1]")]
    BetaOutOfRange(f64),

    #[error("every sampled contraction trial was degenerate")]
    NoValidTrial,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few inputs: {count} values cannot support parameter {param}")]
    TooFewInputs { count: usize, param: usize },

    #[error("aggregation weights are required but missing")]
    MissingWeights,

    #[error("duplicate-attack victim {victim} is not visible to target {target}")]
    VictimNotVisible { victim: usize, target: usize },

    #[error("bad IDX magic number: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    LengthMismatch { images: usize, labels: usize },

    #[error("model diverged: non-finite coordinate at step {step} on agent {agent}")]
    NonFiniteModel { step: u64, agent: usize },

    #[error("bound hypothesis violated: rho = {rho} >= rho* = {rho_star}")]
    HypothesisViolated { rho: f64, rho_star: f64 },

    #[error("Delta = 0 with nonzero skewness; improved bound is undefined")]
    DeltaZero,

    #[error("empty fitting window")]
    EmptyWindow,

    #[error("trace recording grids do not match")]
    GridMismatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
