use thiserror::Error;

/// Errors produced anywhere in the runtime.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{0}` contains non-finite values")]
    NonFiniteWeights(String),
    #[error("weight container: {0}")]
    Container(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty document at index {0}")]
    EmptyDocument(usize),
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid permutation: {0}")]
    Permutation(String),
    #[error("importance table required for mode {0}")]
    MissingImportance(String),
    #[error("NaN importance score for document {0}")]
    NanScore(usize),
    #[error("decode_step called on an empty cache")]
    EmptyCache,
    #[error("no output matched the answer pattern")]
    NoAnswer,
    #[error("invalid answer pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("dense reference is limited to {max} tokens, got {len}")]
    OracleTooLarge { len: usize, max: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
