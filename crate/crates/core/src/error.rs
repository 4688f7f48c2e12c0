use thiserror::Error;

/// Errors surfaced by model construction, ablation and discovery.
#[derive(Debug, Error)]
pub enum AblateError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("malformed weight `{name}`: expected shape {expected:?}, got {got:?}")]
    BadWeight {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("path count {count} exceeds bound {bound}")]
    PathBoundExceeded { count: u64, bound: u64 },

    #[error("granularity mismatch: {0}")]
    GranularityMismatch(String),

    #[error("clean/corrupt length mismatch in pair {pair}: {clean} vs {corrupt}")]
    PairLengthMismatch {
        pair: usize,
        clean: usize,
        corrupt: usize,
    },

    #[error("missing donor entry for source {0}")]
    MissingDonor(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("metric rejected: {0}")]
    MetricRejected(String),

    #[error("invalid circuit: {0}")]
    InvalidCircuit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("ground truth derivation failed: {0}")]
    GroundTruth(String),

    #[error("model self-check failed: {0}")]
    SelfCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, AblateError>;
