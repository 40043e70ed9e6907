//! Error types, one enum per subsystem plus a crate-level umbrella.

use thiserror::Error;

/// Dataset, template and verbalizer failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: invalid record: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate example id `{id}`")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: label `{label}` is not in the label space {space:?}")]
    UnknownLabel {
        path: String,
        line: usize,
        label: String,
        space: Vec<String>,
    },
    #[error("label space is invalid: {0}")]
    InvalidLabelSpace(String),
    #[error("verbalizer is invalid: {0}")]
    InvalidVerbalizer(String),
    #[error("template is invalid: {0}")]
    InvalidTemplate(String),
    #[error("permutation is not a bijection on the label space: {0}")]
    InvalidPermutation(String),
    #[error("example `{example_id}` has no field `{field}` required by the template")]
    MissingField { example_id: String, field: String },
    #[error("organization references unknown example id `{0}`")]
    UnknownExample(String),
    #[error("organization contains duplicate example id `{0}`")]
    DuplicateOrganizationId(String),
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Embedding matrix construction and query failures.
#[derive(Debug, Error)]
pub enum IndexError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding for `{id}` is a zero vector")]
    ZeroVector { id: String },
    #[error("embedding for `{id}` contains a non-finite value")]
    NonFinite { id: String },
    #[error("duplicate embedding id `{id}`")]
    DuplicateId { id: String },
    #[error("id and vector counts differ: {ids} ids, {vectors} vectors")]
    CountMismatch { ids: usize, vectors: usize },
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("no embedding for id `{0}`")]
    UnknownId(String),
    #[error("{path}:{line}: invalid embedding record: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("`{path}` is not a valid embedding sidecar: {message}")]
    Sidecar { path: String, message: String },
    #[error("embedding endpoint failure: {0}")]
    Endpoint(String),
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Candidate selection failures.
#[derive(Debug, Error)]
pub enum SelectError {
    #[error("cannot select from an empty pool")]
    EmptyPool,
    #[error("pool has {have} examples but {need} are required")]
    PoolTooSmall { need: usize, have: usize },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Label-probability backend failures.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("context length exceeded: {detail}")]
    ContextLengthExceeded { detail: String },
    #[error("backend returned HTTP {status}: {message}")]
    Api { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend returned a non-finite logprob for continuation {index}")]
    NonFiniteScore { index: usize },
    #[error("invalid score request: {0}")]
    InvalidRequest(String),
    #[error("no fixture entry for request hash {hash:016x}")]
    FixtureMiss { hash: u64 },
    #[error("failed to read fixtures `{path}`: {message}")]
    Fixture { path: String, message: String },
}

/// Organization sampling and ranking failures.
#[derive(Debug, Error)]
pub enum RankError {
    #[error("candidate set has {have} ids but {need} shots are required")]
    TooFewCandidates { need: usize, have: usize },
    #[error("invalid rank config: {0}")]
    InvalidConfig(String),
    #[error("scoring organization {org_ids:?} failed: {source}")]
    Scoring {
        org_ids: Vec<String>,
        source: BackendError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Evaluation harness failures.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{failed}/{total} samples failed, above the {threshold} threshold")]
    FailureThreshold {
        failed: usize,
        total: usize,
        threshold: f64,
    },
    #[error("invalid eval setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Rank(#[from] RankError),
}

/// Crate-level error, mostly useful to callers that span subsystems.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
