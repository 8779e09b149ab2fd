use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, GradError>;
