use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("flux {flux} outside the valid range [{lo}, {hi}]")]
    Range { flux: f64, lo: f64, hi: f64 },

    #[error("degenerate detuning model: {0}")]
    DegenerateModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range for {n_qubits}-qubit register")]
    QubitIndex { index: usize, n_qubits: usize },

    #[error("{n_qubits} qubits exceeds engine cap of {cap}")]
    EngineCap { n_qubits: usize, cap: usize },

    #[error("integrator failed to converge: {0}")]
    Integrator(String),

    #[error("undefined variance: need at least 2 repetitions, got {0}")]
    UndefinedVariance(usize),

    #[error("scaling fit needs at least 2 strictly positive points: {0}")]
    ScalingInput(String),

    #[error("interrupted: {0}")]
    Interrupted(String),

    #[error("resume refused: {0}")]
    ResumeMismatch(String),

    #[error("malformed record file {path}: {reason}")]
    Records { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
