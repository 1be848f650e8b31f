//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The op set is exactly what the 1-D generative models need: elementwise
//! arithmetic with broadcasting, a few smooth nonlinearities, matrix
//! products, strided (transposed) convolution, row gathers, slicing and
//! concatenation. Backward rules are recorded like any forward op, so
//! [`grad`] with `create_graph = true` yields gradients that can be
//! differentiated again.

pub mod checkpoint;
mod conv;
mod error;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use conv::{conv_out_len, conv_transpose_out_len};
pub use error::AutodiffError;
pub use graph::{backward, grad};
pub use optim::{grad_norm, Adam, AdamConfig, OptimizerState};
pub use params::{EmaShadow, ModelParams, ParamId};
pub use tensor::{grad_enabled, no_grad, with_grad_mode, Tensor};

/// Plain (non-layer) convolution entry points used by fixed-kernel
/// transforms such as an STFT.
pub mod functional {
    use crate::tensor::Tensor;

    /// `x: (B, Cin, L)`, `w: (Cout, Cin, K)`; `None` on incompatible shapes.
    pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Option<Tensor> {
        crate::conv::conv1d_raw(x, w, stride, pad)
    }

    /// `x: (B, Cin, L)`, `w: (Cin, Cout, K)`; `None` on incompatible shapes.
    pub fn conv_transpose1d(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Option<Tensor> {
        crate::conv::conv_transpose1d_raw(x, w, stride, pad, output_padding)
    }
}
