use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the operation's domain (unknown node, bad shape, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid grid: {msg}")]
    InvalidGrid { edge: Option<usize>, msg: String },

    /// No physical voltage profile exists for the requested loads.
    #[error("insolvable power flow: {0}")]
    Insolvable(String),

    #[error("not converged after {iterations} iterations (residual {residual:e}): {context}")]
    NotConverged {
        iterations: usize,
        residual: f64,
        context: String,
    },

    #[error("feasible set is empty: {0}")]
    EmptyFeasible(String),

    #[error("law has no deadline density: {0}")]
    NoDensity(String),

    #[error("law unsupported: {0}")]
    LawUnsupported(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("solver failed at t = {time}: {source}")]
    SolverAt {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn bad_grid(msg: impl Into<String>) -> Self {
        Error::InvalidGrid { edge: None, msg: msg.into() }
    }

    pub fn bad_edge(edge: usize, msg: impl Into<String>) -> Self {
        Error::InvalidGrid { edge: Some(edge), msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
