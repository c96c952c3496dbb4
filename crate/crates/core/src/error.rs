use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building or differentiating a simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A node reference did not point at an existing tape entry, or an op
    /// received the wrong number of inputs.
    #[error("graph construction error: {0}")]
    Graph(String),

    /// A caller violated a documented precondition (shapes, ranges, duplicates).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up in a forward value or a gradient.
    #[error("non-finite value produced by `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    #[error("singular matrix: zero pivot at index {pivot}")]
    Singular { pivot: usize },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("coefficient parameterization diverged: {0}")]
    Diverged(String),

    #[error("finite-difference probe failed at parameter index {index}: {source}")]
    Probe {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A reverse-mode gradient disagreed with finite differences.
    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e}")]
    GradientCheck { max_rel_error: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures of the forward simulation (as opposed to misuse of the API).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numeric { .. }
            | Error::Singular { .. }
            | Error::NonConvergence { .. }
            | Error::LineSearch(_)
            | Error::Diverged(_) => true,
            Error::Probe { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
