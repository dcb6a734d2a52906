use thiserror::Error;

use crate::cache::DomainId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("invalid cache geometry: {0}")]
    InvalidGeometry(String),
    #[error("domain {domain} accessed address {address:#x} outside its namespace")]
    NamespaceViolation { domain: DomainId, address: u64 },
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("cannot build conflict sets: {0}")]
    InfeasibleConflictSets(String),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

impl ScenarioError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("line {line}: occupancy {occupancy} exceeds cache capacity {capacity}")]
    OccupancyBound {
        line: u64,
        occupancy: u64,
        capacity: u64,
    },
    #[error("no windows")]
    NoWindows,
    #[error("unknown domain {0}")]
    UnknownDomain(DomainId),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series too short: need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("max_lag {max_lag} out of range for series of length {len}")]
    LagOutOfRange { max_lag: usize, len: usize },
    #[error("trace kinds differ: {0:?} vs {1:?}")]
    KindMismatch(crate::telemetry::TraceKind, crate::telemetry::TraceKind),
    #[error("pairwise scan needs at least 2 domains, got {0}")]
    TooFewDomains(usize),
}
