//! Windowing, normalization, window files, manifests and subject-wise
//! splits.

mod classmap;
mod format;
mod manifest;
mod normalize;
mod split;
mod windowing;

pub use classmap::ClassMap;
pub use format::{read_window_file, write_window_file, WindowFile, WINDOW_MAGIC};
pub use manifest::{Manifest, ManifestEntry, NormRecord, MANIFEST_VERSION};
pub use normalize::{
    denormalize_minmax, minmax_normalize, zscore_normalize, NormMeta, NormScheme, NormStats,
    NORM_EPS,
};
pub use split::{
    assign_splits, parse_split_csv, split_csv, validate_split, Split, SplitCounts, SplitReport,
};
pub use windowing::{extract_windows, stride, window_count, window_length, Extraction, Rejection};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Montage admitted by the pipeline, in storage order.
pub const CANONICAL_CHANNELS: [&str; 8] = ["Fp1", "Fp2", "C3", "C4", "O1", "O2", "T3", "T4"];
pub const CANONICAL_FS: f64 = 250.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("window length is zero for S = {seconds} s at {fs} Hz")]
    ZeroLength { seconds: f64, fs: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("overlap too high for L: stride floor((1 - {rho}) * {len}) is 0")]
    OverlapTooHigh { rho: f64, len: usize },
    #[error("subject `{subject}` appears in splits {splits:?}")]
    Leakage { subject: String, splits: Vec<Split> },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("class map: {0}")]
    ClassMap(String),
    #[error("split CSV line {line}: {msg}")]
    SplitCsv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Annotated interval `[start, end)` in samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Continuous multi-channel recording, channel-major `C x T` in µV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub subject_id: String,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub data: Vec<f64>,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        if self.channel_names.is_empty() {
            0
        } else {
            self.data.len() / self.channel_names.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.data[c * t..(c + 1) * t]
    }
}

/// Where a window was cut from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSource {
    pub recording: String,
    pub start: usize,
}

/// Fixed-size `C x L` segment, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub data: Vec<f64>,
    pub channels: usize,
    pub len: usize,
    pub label: usize,
    pub subject_id: String,
    pub source: WindowSource,
    pub norm: NormMeta,
}

impl Window {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
