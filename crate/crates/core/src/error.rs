use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. Each variant maps to a stable category
/// string so front-ends can report failures in a machine-readable way.
#[derive(Debug, Error)]
pub enum Error {
    #[error("address {addr:#x} is outside the {width}-bit physical address space")]
    AddressRange { addr: u64, width: u8 },
    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },
    #[error("cannot construct {what}: {reason}")]
    Construction { what: &'static str, reason: String },
    #[error("memory pool has no eligible pair for differing bits {bits:?} after {draws} draws")]
    PoolCoverage { bits: Vec<u8>, draws: usize },
    #[error("threshold estimation failed: {0}")]
    ThresholdEstimation(String),
    #[error("inconsistent measurements: {0}")]
    Inconsistency(String),
    #[error("search budget exceeded: {needed} candidates > budget {budget}")]
    Budget { needed: u128, budget: u128 },
    #[error("pipeline model error: {0}")]
    Model(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("report kind mismatch: expected {expected}, got {actual}")]
    KindMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::AddressRange { .. } => "range",
            Error::Lookup { .. } => "lookup",
            Error::Construction { .. } => "construction",
            Error::PoolCoverage { .. } => "pool-coverage",
            Error::ThresholdEstimation(_) => "threshold-estimation",
            Error::Inconsistency(_) => "inconsistency",
            Error::Budget { .. } => "budget",
            Error::Model(_) => "model",
            Error::Contract(_) => "contract",
            Error::Placement(_) => "placement",
            Error::Config(_) => "config",
            Error::KindMismatch { .. } => "kind-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn construction(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Construction { what, reason: reason.into() }
    }
}
