use thiserror::Error;

/// Errors raised by tensor operations, model assembly, data I/O and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor extent product overflows")]
    Overflow,

    #[error("loss must have shape (1,1,1,1), got {0:?}")]
    NotScalar([usize; 4]),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter or buffer `{0}`")]
    UnknownName(String),

    #[error("non-finite cost entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("degenerate box (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
