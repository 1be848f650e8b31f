use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("op `{0}` has no differentiable backward; cannot build a second-order graph")]
    NotTwiceDifferentiable(&'static str),
    #[error("{layer}: shape mismatch, expected {expected}, got {got:?}")]
    Shape {
        layer: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
