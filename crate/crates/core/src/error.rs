use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (non-finite loss)")]
    Divergence { step: usize },

    #[error("perturbation precondition violated: {0}")]
    Precondition(String),

    #[error("no feasible perturbation remains at step {step}")]
    Infeasible { step: usize },

    #[error("replay mismatch at step {step}: {msg}")]
    Replay { step: usize, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::NonScalarLoss { .. } => "non-scalar-loss",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::InvalidGraph(_) => "invalid-graph",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Precondition(_) => "precondition",
            Error::Infeasible { .. } => "infeasible",
            Error::Replay { .. } => "replay",
        }
    }

    /// The offending attack or replay step, when there is one.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Divergence { step } | Error::Infeasible { step } | Error::Replay { step, .. } => Some(*step),
            _ => None,
        }
    }
}
