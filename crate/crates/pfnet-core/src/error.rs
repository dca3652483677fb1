use thiserror::Error;

/// Error type shared by the whole crate.
///
/// The variants map onto the failure classes the CLI distinguishes:
/// validation problems (`Shape`, `Config`, `Geometry`, `Format`, `Usage`)
/// versus runtime problems (`Io`, `Resource`, `Numeric`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("resource error: {0}")]
    Resource(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid input rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Config(_)
                | Error::Geometry(_)
                | Error::Format(_)
                | Error::Usage(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
