//! Conditional generative models for multi-channel artifact windows: a
//! WGAN-GP with a projection critic and a DDPM with a FiLM-conditioned
//! 1-D U-Net.

mod batch;
pub mod ddpm;
mod error;
mod util;
pub mod wgan;

pub use batch::{tensor_to_windows, WindowBatcher};
pub use error::ModelError;

use serde::{Deserialize, Serialize};

/// Shape of the data a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub channels: usize,
    pub len: usize,
    pub num_classes: usize,
}

impl DataShape {
    pub(crate) fn check(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.len == 0 || self.num_classes == 0 {
            return Err(ModelError::Config(format!("degenerate data shape {self:?}")));
        }
        Ok(())
    }
}

