use std::fmt;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("iteration did not converge after {iterations} sweeps (last change {residual:e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("{what} exceeds the configured cap ({size} > {cap})")]
    CapExceeded { what: &'static str, size: u128, cap: u128 },

    #[error("invalid weighting: {0}")]
    InvalidWeighting(String),

    #[error("abstract policy has no row for class {0}")]
    MissingClass(String),

    #[error("abstractions are defined over different state sets ({left} vs {right} states)")]
    DomainMismatch { left: usize, right: usize },

    #[error("trace {trace} has zero likelihood at step {step}")]
    DegenerateLikelihood { trace: usize, step: usize },

    #[error("line {line}, column {column}: {kind}")]
    Parse { line: usize, column: usize, kind: ParseErrorKind },

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error("expected a {expected} task, found {found}")]
    WrongDomain { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The specific reason a task file failed to parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MissingHeader,
    UnknownDomain(String),
    BadMeta(String),
    UnknownGlyph(char),
    RaggedRow { expected: usize, found: usize },
    EmptyGrid,
    NoAgent,
    MultipleAgents,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::MissingHeader => write!(f, "missing `domain=<kind>` header"),
            ParseErrorKind::UnknownDomain(d) => write!(f, "unknown domain kind `{d}`"),
            ParseErrorKind::BadMeta(m) => write!(f, "malformed meta line: {m}"),
            ParseErrorKind::UnknownGlyph(c) => write!(f, "unknown glyph `{c}`"),
            ParseErrorKind::RaggedRow { expected, found } => {
                write!(f, "row has {found} cells, expected {expected}")
            }
            ParseErrorKind::EmptyGrid => write!(f, "grid has no rows"),
            ParseErrorKind::NoAgent => write!(f, "no agent start `A` in grid"),
            ParseErrorKind::MultipleAgents => write!(f, "more than one agent start `A`"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
