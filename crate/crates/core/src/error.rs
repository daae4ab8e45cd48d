use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("observer velocity is not unit timelike: eta(U,U) = {norm}, U0 = {u0}")]
    Normalization { norm: f64, u0: f64 },
    #[error("velocity is not timelike: eta(y,y) = {0}")]
    NotTimelike(f64),
    #[error("sample {index} is off the unit hyperboloid: eta(y,y) - 1 = {residual:e}")]
    OffHyperboloid { index: usize, residual: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter {name}: {reason}")]
    Invalid { name: &'static str, reason: String },
    #[error("non-finite state in {module} at step {step}")]
    NonFinite { module: &'static str, step: usize },
    #[error("step size underflow in {module} at s = {s}")]
    StepUnderflow { module: &'static str, s: f64 },
    #[error("integration of sample {index} failed: {source}")]
    Sample { index: usize, source: Box<Error> },
    #[error("{what} = {value} lies outside the covered range [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("missing stencil neighbour: {0}")]
    Stencil(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { name, reason: reason.into() }
    }

    /// Exit status used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 1,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
