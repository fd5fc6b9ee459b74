//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: invalid UTF-8 on line {line}")]
    Utf8 { path: String, line: usize },

    #[error("file not found: {path}")]
    MissingFile { path: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },

    #[error("unknown language: {0}")]
    UnknownLanguage(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("batch stream for language {0} is empty")]
    EmptyStream(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss ({value}) at epoch {epoch}, batch {batch} ({lang})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lang: String,
        value: f64,
    },

    #[error("zero-norm {}", .token.as_ref().map(|t| format!("embedding for token \"{t}\"")).unwrap_or_else(|| "vector".into()))]
    ZeroNorm { token: Option<String> },

    #[error("k = {k} exceeds the {v} rows of the opposing space")]
    KTooLarge { k: usize, v: usize },

    #[error("{path}:{line}: malformed line: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}{}: {msg}", .line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("tensor {name}: expected shape {expected}, found {found}")]
    TensorShape {
        name: String,
        expected: String,
        found: String,
    },

    #[error("token \"{0}\" contains whitespace and cannot be exported")]
    TokenHasWhitespace(String),

    #[error("duplicate token \"{token}\"{}", .line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    DuplicateToken { token: String, line: Option<usize> },

    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI maps this error to: 2 for usage-class errors
    /// (missing files), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingFile { .. } => 2,
            _ => 1,
        }
    }
}
