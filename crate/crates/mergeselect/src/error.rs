use thiserror::Error;

#[derive(Error, Debug)]
pub enum MsError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, MsError>;

impl From<serde_json::Error> for MsError {
    fn from(e: serde_json::Error) -> Self {
        MsError::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for MsError {
    fn from(e: toml::de::Error) -> Self {
        MsError::Serde(e.to_string())
    }
}
