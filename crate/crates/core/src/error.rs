use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("oracle only: {0}")]
    OracleTooLarge(String),

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("velocity box exhausted at node {node} (v_max = {v_max}){}", time_suffix(*.time_index))]
    VelocityBoxExhausted {
        node: usize,
        v_max: f64,
        time_index: Option<usize>,
    },

    #[error("CFL violated: dt = {dt} exceeds admissible dt = {admissible_dt}")]
    CflViolation { dt: f64, admissible_dt: f64 },

    #[error("mass not conserved: |mass - 1| = {0:e}")]
    MassDefect(f64),

    #[error("{what} did not converge after {iterations} iterations (last residual {last:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{context} at time index {time_index}: {source}")]
    AtTime {
        context: &'static str,
        time_index: usize,
        #[source]
        source: Box<Error>,
    },
}

fn time_suffix(t: Option<usize>) -> String {
    match t {
        Some(k) => format!(" at time index {k}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn at_time(self, context: &'static str, time_index: usize) -> Self {
        Error::AtTime {
            context,
            time_index,
            source: Box::new(self),
        }
    }

    /// Strips time-index wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
