use hyperinvert_autograd::io::TensorIoError;
use hyperinvert_core::Error as CoreError;

/// Errors surfaced to the operator, each with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape/spec mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Config(_) | CoreError::InvalidArgument(_) => CliError::Config(e.to_string()),
            CoreError::Spec(_) | CoreError::Shape(_) | CoreError::Tensor(TensorIoError::Mismatch { .. }) => {
                CliError::Mismatch(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        CoreError::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Other(format!("image error: {e}"))
    }
}
