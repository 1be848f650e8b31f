use artifactgen_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite {what} at step {step}: {diagnostic}")]
    NonFinite {
        what: String,
        step: usize,
        diagnostic: String,
    },
}
