use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] slu_core::Error),

    #[error("{path}: {msg}")]
    Config { path: String, msg: String },

    #[error("invalid config: {field}: {msg}")]
    Field { field: String, msg: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Field {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
