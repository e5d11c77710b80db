use crate::topology::ApiId;

/// Errors surfaced by model building, fitting, interventions, and simulation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid filter spec: {0}")]
    FilterConfig(String),

    #[error("reservoir size mismatch: {left} vs {right}")]
    ReservoirSizeMismatch { left: usize, right: usize },

    #[error("unsupported document version: expected {expected:?}, found {found:?}")]
    SchemaVersion { expected: String, found: String },

    #[error("malformed document: {0}")]
    Document(String),

    #[error("pfa walk for {api} exceeded {max_steps} steps; probable cycle with no finish mass")]
    WalkOverrun { api: ApiId, max_steps: usize },

    #[error("underdetermined fit for {api}: {observations} observation(s) for {terms} term(s)")]
    UnderdeterminedFit {
        api: ApiId,
        observations: usize,
        terms: usize,
    },

    #[error("no observations for {api}; cannot fit")]
    NoObservations { api: ApiId },

    #[error("called dependency {callee} has no measured latency")]
    MissingMeasurement { callee: ApiId },

    #[error("baggage key {key:?} already set")]
    BaggageOverwrite { key: String },

    #[error("call depth limit {max_depth} exceeded at {api}")]
    DepthExceeded { api: ApiId, max_depth: usize },

    #[error("intervention op {index} rejected: {reason}")]
    ScriptRejected { index: usize, reason: String },

    #[error("bundle failed validation with {count} violation(s); first: {first}")]
    InvalidBundle { count: usize, first: String },

    #[error("unknown api {0}")]
    UnknownApi(ApiId),

    #[error("invalid simulation config: {0}")]
    SimConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
