use thiserror::Error;

#[derive(Debug, Error)]
pub enum SanError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("softmax row {row} has no allowed position")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("target of length {target_len} needs at least {required} frames, lattice has {frames}")]
    Infeasible {
        target_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("enumeration oracle would visit {paths} paths (limit {limit})")]
    OracleSize { paths: f64, limit: f64 },

    #[error("loss diverged at epoch {epoch}, batch {batch}, head {head}")]
    Diverged { epoch: usize, batch: usize, head: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SanError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> SanError {
    SanError::Dimension {
        op,
        detail: detail.into(),
    }
}
