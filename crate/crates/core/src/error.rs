use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("architecture length {0} outside [2, 16]")]
    ArchLength(usize),
    #[error("empty architecture")]
    EmptyArch,
    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch { op: &'static str, left: usize, right: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("level {0} outside [0, 320]")]
    Level(i64),
    #[error("trace of length {len} shorter than receptive field {min}")]
    TraceTooShort { len: usize, min: usize },
    #[error("label of length {label} not admissible for {frames} frames")]
    LabelTooLong { label: usize, frames: usize },
    #[error("empty truth sequence")]
    EmptyTruth,
    #[error("infeasible architecture: {0}")]
    Infeasible(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("surrogate is untrained")]
    Untrained,
    #[error("perturbation outside [-eps, 0] at index {0}")]
    OutOfBall(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Grad(#[from] scaforge_grad::GradError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), detail: e.to_string() }
    }
}
