use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for the command-line front end.
    ///
    /// 1 for configuration problems, 2 for missing or malformed data, 3 for
    /// numeric failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Image(_) => 2,
            Error::Numeric(_) => 3,
            Error::Shape(_) | Error::Contract(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
