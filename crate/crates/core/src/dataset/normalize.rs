use serde::{Deserialize, Serialize};

use super::{NormRecord, Recording, Window};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScheme {
    MinmaxWindow,
    ZscoreRecording,
    None,
}

impl NormScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormScheme::MinmaxWindow => "minmax_window",
            NormScheme::ZscoreRecording => "zscore_recording",
            NormScheme::None => "none",
        }
    }
}

/// Scheme-specific statistics; the scheme itself is stored alongside, so
/// the variants are told apart by their fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormStats {
    MinmaxWindow {
        min: f64,
        max: f64,
        eps: f64,
        degenerate: bool,
    },
    ZscoreRecording {
        mean: Vec<f64>,
        std: Vec<f64>,
        eps: f64,
        /// Channels with zero variance (mapped to all zeros).
        degenerate_channels: Vec<usize>,
    },
    None,
}

/// Normalization applied to a window plus the statistics to undo it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "NormRecord", try_from = "NormRecord")]
pub struct NormMeta {
    pub stats: NormStats,
}

impl NormMeta {
    pub fn none() -> Self {
        Self {
            stats: NormStats::None,
        }
    }

    pub fn scheme(&self) -> NormScheme {
        match self.stats {
            NormStats::MinmaxWindow { .. } => NormScheme::MinmaxWindow,
            NormStats::ZscoreRecording { .. } => NormScheme::ZscoreRecording,
            NormStats::None => NormScheme::None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match &self.stats {
            NormStats::MinmaxWindow { degenerate, .. } => *degenerate,
            NormStats::ZscoreRecording {
                degenerate_channels,
                ..
            } => !degenerate_channels.is_empty(),
            NormStats::None => false,
        }
    }
}

/// Maps a window to `[-1, 1]` with extrema taken jointly over all channels
/// and samples: `2 (x - m) / max(M - m, eps) - 1`. A constant window maps to
/// all `-1` and is flagged degenerate.
pub fn minmax_normalize(w: &Window) -> Window {
    let m = w.data.iter().copied().fold(f64::INFINITY, f64::min);
    let big_m = w.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (big_m - m).max(NORM_EPS);
    let data = w.data.iter().map(|&x| 2.0 * (x - m) / range - 1.0).collect();
    Window {
        data,
        norm: NormMeta {
            stats: NormStats::MinmaxWindow {
                min: m,
                max: big_m,
                eps: NORM_EPS,
                degenerate: big_m - m <= NORM_EPS,
            },
        },
        ..w.clone()
    }
}

/// Inverse of [`minmax_normalize`] using the persisted extrema. Windows
/// without min-max statistics are returned unchanged.
pub fn denormalize_minmax(w: &Window) -> Window {
    let NormStats::MinmaxWindow { min, max, eps, .. } = w.norm.stats else {
        return w.clone();
    };
    let range = (max - min).max(eps);
    Window {
        data: w.data.iter().map(|&v| (v + 1.0) * range / 2.0 + min).collect(),
        norm: NormMeta::none(),
        ..w.clone()
    }
}

/// Per-channel `(x - mu_c) / (sigma_c + eps)` over the whole recording,
/// with the population standard deviation. Zero-variance channels become
/// all zeros and are listed in the returned statistics.
pub fn zscore_normalize(rec: &Recording) -> (Recording, NormMeta) {
    let t = rec.len();
    let mut data = Vec::with_capacity(rec.data.len());
    let mut mean = Vec::with_capacity(rec.channels());
    let mut std = Vec::with_capacity(rec.channels());
    let mut degenerate_channels = Vec::new();
    for c in 0..rec.channels() {
        let x = rec.channel(c);
        let mu = x.iter().sum::<f64>() / t as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t as f64;
        let sigma = var.sqrt();
        if sigma == 0.0 {
            degenerate_channels.push(c);
            data.extend(std::iter::repeat(0.0).take(t));
        } else {
            data.extend(x.iter().map(|v| (v - mu) / (sigma + NORM_EPS)));
        }
        mean.push(mu);
        std.push(sigma);
    }
    let meta = NormMeta {
        stats: NormStats::ZscoreRecording {
            mean,
            std,
            eps: NORM_EPS,
            degenerate_channels,
        },
    };
    (
        Recording {
            data,
            ..rec.clone()
        },
        meta,
    )
}
