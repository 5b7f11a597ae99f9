use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tape node {node}: {detail}")]
    TapeShape { node: usize, detail: String },

    #[error("tape: {0}")]
    Tape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("field primitive `{primitive}` is not smooth enough for expansion order {order}")]
    NotSmooth { primitive: &'static str, order: usize },

    #[error("nested-JVP oracle supports orders 1..=4, got {0}")]
    OracleOrder(usize),

    #[error("matrix is singular; use the series form instead")]
    Singular,

    #[error("stiffness failure: step size {step:e} fell below {min:e} at t = {t}")]
    StiffnessFailure { step: f64, min: f64, t: f64 },

    #[error("step too large for enclosure: dt = {dt:e}, max admissible dt = {max_dt:e}")]
    StepTooLarge { dt: f64, max_dt: f64 },

    #[error("non-finite loss at record {record}")]
    NonFiniteLoss { record: usize },

    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Model(#[from] crate::model_io::ModelError),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
