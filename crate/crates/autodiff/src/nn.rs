//! Layer set for the 1-D generator, critic and U-Net.
//!
//! Layers hold only parameter handles. `forward` takes the parameter slice
//! explicitly so the same layer can run on live weights or on an EMA copy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{conv1d_raw, conv_out_len, conv_transpose1d_raw, conv_transpose_out_len};
use crate::error::AutodiffError;
use crate::params::{ModelParams, ParamId};
use crate::tensor::Tensor;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn shape_err(layer: &str, expected: impl Into<String>, got: &[usize]) -> AutodiffError {
    AutodiffError::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        got: got.to_vec(),
    }
}

/// `y = x W + b` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
    name: String,
}

impl Linear {
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = params.add(
            format!("{name}.weight"),
            &[in_features, out_features],
            uniform(rng, in_features * out_features, bound),
        );
        let b = bias.then(|| {
            params.add(
                format!("{name}.bias"),
                &[out_features],
                uniform(rng, out_features, bound),
            )
        });
        Self {
            w,
            b,
            in_features,
            out_features,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor, AutodiffError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_features {
            return Err(shape_err(
                &self.name,
                format!("(B, {})", self.in_features),
                s,
            ));
        }
        let y = x.matmul(&p[self.w.0]);
        Ok(match self.b {
            Some(b) => y.add(&p[b.0].reshape(&[1, self.out_features])),
            None => y,
        })
    }
}

/// Strided 1-D convolution with explicit symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    name: String,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let w = params.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            uniform(rng, out_channels * in_channels * kernel, bound),
        );
        let b = Some(params.add(
            format!("{name}.bias"),
            &[out_channels],
            uniform(rng, out_channels, bound),
        ));
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            name: name.to_string(),
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        conv_out_len(len, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor, AutodiffError> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.in_channels {
            return Err(shape_err(
                &self.name,
                format!("(B, {}, L)", self.in_channels),
                s,
            ));
        }
        let y = conv1d_raw(x, &p[self.w.0], self.stride, self.padding).ok_or_else(|| {
            shape_err(
                &self.name,
                format!("length >= kernel {} after padding", self.kernel),
                s,
            )
        })?;
        Ok(match self.b {
            Some(b) => y.add(&p[b.0].reshape(&[1, self.out_channels, 1])),
            None => y,
        })
    }
}

/// Transposed 1-D convolution, weight layout `(in, out, k)`.
///
/// `L_out = (L_in - 1) * stride + k - 2 * padding + output_padding`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    name: String,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((out_channels * kernel) as f64).sqrt();
        let w = params.add(
            format!("{name}.weight"),
            &[in_channels, out_channels, kernel],
            uniform(rng, in_channels * out_channels * kernel, bound),
        );
        let b = Some(params.add(
            format!("{name}.bias"),
            &[out_channels],
            uniform(rng, out_channels, bound),
        ));
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            name: name.to_string(),
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        conv_transpose_out_len(len, self.kernel, self.stride, self.padding, self.output_padding)
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor, AutodiffError> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.in_channels {
            return Err(shape_err(
                &self.name,
                format!("(B, {}, L)", self.in_channels),
                s,
            ));
        }
        let y = conv_transpose1d_raw(x, &p[self.w.0], self.stride, self.padding, self.output_padding)
            .ok_or_else(|| shape_err(&self.name, "a length the geometry can invert", s))?;
        Ok(match self.b {
            Some(b) => y.add(&p[b.0].reshape(&[1, self.out_channels, 1])),
            None => y,
        })
    }
}

/// Lookup table of `rows` vectors of width `dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
    name: String,
}

impl Embedding {
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        let table = params.add(format!("{name}.table"), &[rows, dim], data);
        Self {
            table,
            rows,
            dim,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, p: &[Tensor], idx: &[usize]) -> Result<Tensor, AutodiffError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(shape_err(
                &self.name,
                format!("index < {}", self.rows),
                &[bad],
            ));
        }
        Ok(p[self.table.0].gather_rows(idx))
    }
}

/// Group normalization over `(C/G, L)` blocks with a per-channel affine map.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    name: String,
}

impl GroupNorm {
    pub fn new(params: &mut ModelParams, name: &str, groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels % groups == 0,
            "{name}: {channels} channels not divisible into {groups} groups"
        );
        let gamma = params.add(format!("{name}.gamma"), &[channels], vec![1.0; channels]);
        let beta = params.add(format!("{name}.beta"), &[channels], vec![0.0; channels]);
        Self {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor, AutodiffError> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.channels {
            return Err(shape_err(
                &self.name,
                format!("(B, {}, L)", self.channels),
                s,
            ));
        }
        let (b, c, l) = (s[0], s[1], s[2]);
        let per_group = (c / self.groups) * l;
        let xg = x.reshape(&[b, self.groups, per_group]);
        let inv_n = 1.0 / per_group as f64;
        let mean = xg.sum_axis_keep(2).scale(inv_n);
        let centered = xg.sub(&mean);
        let var = centered.square().sum_axis_keep(2).scale(inv_n);
        let inv_std = var.add_scalar(self.eps).powf(-0.5);
        let normed = centered.mul(&inv_std).reshape(&[b, c, l]);
        let gamma = p[self.gamma.0].reshape(&[1, c, 1]);
        let beta = p[self.beta.0].reshape(&[1, c, 1]);
        Ok(normed.mul(&gamma).add(&beta))
    }
}

/// Mean over the time axis: `(B, C, L) -> (B, C)`.
pub fn global_avg_pool1d(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = x.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(shape_err("global_avg_pool1d", "(B, C, L>0)", s));
    }
    let (b, c, l) = (s[0], s[1], s[2]);
    Ok(x.sum_to(&[b, c, 1]).reshape(&[b, c]).scale(1.0 / l as f64))
}

/// Feature-wise affine modulation `gamma * h + beta`, with `gamma, beta`
/// of shape `(B, C)` broadcast over time.
pub fn film(h: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = h.shape();
    if s.len() != 3 {
        return Err(shape_err("film", "(B, C, L)", s));
    }
    let (b, c) = (s[0], s[1]);
    for t in [gamma, beta] {
        if t.shape() != [b, c] {
            return Err(shape_err("film", format!("modulation ({b}, {c})"), t.shape()));
        }
    }
    Ok(h
        .mul(&gamma.reshape(&[b, c, 1]))
        .add(&beta.reshape(&[b, c, 1])))
}

/// Pointwise nonlinearities used by the networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Silu,
    /// Single-node SiLU without a recorded backward.
    FusedSilu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::LeakyRelu(s) => x.leaky_relu(s),
            Activation::Silu => x.silu(),
            Activation::FusedSilu => x.silu_fused(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x.clone(),
        }
    }

    /// Whether gradients through this activation can be differentiated
    /// again. LeakyReLU qualifies with its almost-everywhere derivative.
    pub fn supports_double_backward(&self) -> bool {
        !matches!(self, Activation::FusedSilu)
    }
}
