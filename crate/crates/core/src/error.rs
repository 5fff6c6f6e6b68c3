use alloc::string::String;
use alloc::vec::Vec;

use crate::model::LayerKey;

/// Errors produced anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("malformed model document: {0}")]
    MalformedModel(String),
    #[error("channel chain mismatch between layer blocks {prev} and {next}: {out_channels} != {in_channels}")]
    ChannelChain {
        prev: usize,
        next: usize,
        out_channels: u32,
        in_channels: u32,
    },
    #[error("non-parametric layer {index} has no preceding parametric layer")]
    OrphanLayer { index: usize },
    #[error("model has no parametric layers")]
    NoParametricLayers,
    #[error("layer key {0} does not occur in the model")]
    KeyAbsent(LayerKey),

    #[error("coordinate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("covariance is not positive definite even with jitter {jitter:e}")]
    SingularCovariance { jitter: f64 },
    #[error("query {query:?} is outside the fitted bounds {bounds:?}")]
    OutOfBounds { query: Vec<u32>, bounds: Vec<(u32, u32)> },
    #[error("invalid kernel or fit parameters: {0}")]
    InvalidParameters(String),

    #[error("power trace needs at least 2 samples")]
    ShortTrace,
    #[error("power trace timestamps are not strictly increasing at sample {0}")]
    NonMonotoneTrace(usize),
    #[error("invalid power trace: {0}")]
    InvalidTrace(String),
    #[error("simulator has no surface for layer key {0}")]
    SimKeyMissing(LayerKey),
    #[error("invalid simulator config: {0}")]
    InvalidSimConfig(String),
    #[error("measurement backend failed: {0}")]
    Backend(String),
    #[error("degenerate variance in correlation input")]
    DegenerateVariance,

    #[error("missing fitted surface for layer key {0}")]
    MissingSurface(LayerKey),
    #[error("{0} surface must be fitted before this extraction")]
    MissingPrerequisite(crate::model::Role),
    #[error("invalid profile plan: {0}")]
    InvalidPlan(String),

    #[error("baseline regression needs at least two distinct FLOP counts")]
    DegenerateDesign,
    #[error("no FLOP formula for layer kind {0}")]
    NoFlopFormula(String),

    #[error("zero actual value at index {0}")]
    ZeroActual(usize),
    #[error("length mismatch: {0} actual vs {1} estimated")]
    LengthMismatch(usize, usize),

    #[error("estimate is incomplete: {0} block(s) could not be estimated")]
    IncompleteEstimate(usize),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
