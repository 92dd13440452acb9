use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown growth rate `{0}`")]
    UnknownRate(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("time {t} lies outside the {domain} domain of `{name}`")]
    Domain { name: String, t: f64, domain: &'static str },
    #[error("empty grid")]
    EmptyGrid,
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("trajectory norm exceeded {bound:e} at t = {t}")]
    Escape { t: f64, bound: f64 },
    #[error("degenerate regression: {0}")]
    Degenerate(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("divergent integral: {0}")]
    Divergent(String),
    #[error("tail bound not certifiable: {0}")]
    Tail(String),
    #[error("fixed-point iteration failed: {0}")]
    NoContraction(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
