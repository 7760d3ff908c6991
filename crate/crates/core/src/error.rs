use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("moment of order {order} is infinite for {law}")]
    Moment { law: String, order: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("inconsistent parameters: {0}")]
    Consistency(String),

    #[error("{blocks} blocks do not divide a sample of size {samples}")]
    Divisibility { samples: usize, blocks: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("bracket error: {0}")]
    Bracket(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rank deficient design: N = {rows} < d = {cols}")]
    RankDeficient { rows: usize, cols: usize },

    #[error("quantile error: {0}")]
    Quantile(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("insufficient Monte Carlo resolution: {0}")]
    Resolution(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config { .. })
    }

    /// Failures of a numerical contract (solver, eigen, Monte Carlo resolution).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::Contract(_)
                | Error::Convergence { .. }
                | Error::Bracket(_)
                | Error::RankDeficient { .. }
                | Error::Resolution(_)
                | Error::Quantile(_)
        )
    }
}
