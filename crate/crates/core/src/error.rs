use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid body proportions: {0}")]
    InvalidProportions(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown identity {0}")]
    UnknownIdentity(usize),

    #[error("unknown part `{0}`")]
    UnknownPart(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unevaluable queries (no valid positive in gallery): {0:?}")]
    Unevaluable(Vec<usize>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidProportions(_)
                | Error::Shape(_)
                | Error::UnknownIdentity(_)
                | Error::UnknownPart(_)
                | Error::Precondition(_)
                | Error::Unevaluable(_)
        )
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
