use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric `{metric}` is undefined: zero denominator")]
    UndefinedMetric { metric: &'static str },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("placement failed: {0}")]
    Placement(String),

    #[error("generation failed for master seed {master_seed}, case {case}: {message}")]
    Generation {
        master_seed: u64,
        case: usize,
        message: String,
    },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (class {class_loss}, box {box_loss}, mask {mask_loss})"
    )]
    Training {
        epoch: usize,
        batch: usize,
        class_loss: f64,
        box_loss: f64,
        mask_loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
