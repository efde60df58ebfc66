use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("CFL condition violated: dt = {dt} s exceeds the stable limit {limit} s")]
    Cfl { dt: f64, limit: f64 },

    #[error("wavefield became non-finite at time step {step}")]
    Unstable { step: usize },

    #[error("degenerate trace: squared signal has zero mass")]
    DegenerateTrace,

    #[error("argument {0} outside the domain [0, 1]")]
    Domain(f64),

    #[error("invalid probability trace: {0}")]
    InvalidDensity(String),

    #[error("eikonal solver did not converge after {0} sweeps")]
    EikonalNonConvergence(usize),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("source {id}: {inner}")]
    Source {
        id: usize,
        #[source]
        inner: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tags an error with the id of the source whose solve produced it.
    pub fn for_source(self, id: usize) -> Self {
        Error::Source {
            id,
            inner: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
