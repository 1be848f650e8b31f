use artifactgen_autodiff::Tensor;
use artifactgen_core::dataset::{NormMeta, Window, WindowSource};
use rand::Rng;

use crate::ModelError;

/// Training windows packed into one contiguous buffer for fast batching.
#[derive(Clone, Debug)]
pub struct WindowBatcher {
    data: Vec<f64>,
    labels: Vec<usize>,
    channels: usize,
    len: usize,
}

impl WindowBatcher {
    pub fn new(windows: &[Window], num_classes: usize) -> Result<Self, ModelError> {
        let first = windows
            .first()
            .ok_or_else(|| ModelError::Data("no training windows".into()))?;
        let (channels, len) = (first.channels, first.len);
        let mut data = Vec::with_capacity(windows.len() * channels * len);
        let mut labels = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            if w.channels != channels || w.len != len {
                return Err(ModelError::Data(format!(
                    "window {i} is {}x{}, expected {channels}x{len}",
                    w.channels, w.len
                )));
            }
            if w.label >= num_classes {
                return Err(ModelError::Data(format!("window {i} has label {} >= {num_classes}", w.label)));
            }
            if !w.is_finite() {
                return Err(ModelError::Data(format!("window {i} has non-finite values")));
            }
            data.extend_from_slice(&w.data);
            labels.push(w.label);
        }
        Ok(Self {
            data,
            labels,
            channels,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.channels * self.len;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&[idx.len(), self.channels, self.len], data), labels)
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..self.len())).collect();
        self.gather(&idx)
    }
}

/// Splits a `(B, C, L)` tensor into windows tagged with `labels`.
pub fn tensor_to_windows(t: &Tensor, labels: &[usize], origin: &str) -> Vec<Window> {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected (B, C, L)");
    assert_eq!(s[0], labels.len(), "one label per window");
    let n = s[1] * s[2];
    t.data()
        .chunks_exact(n)
        .zip(labels)
        .enumerate()
        .map(|(i, (d, &label))| Window {
            data: d.to_vec(),
            channels: s[1],
            len: s[2],
            label,
            subject_id: origin.to_string(),
            source: WindowSource {
                recording: origin.to_string(),
                start: i,
            },
            norm: NormMeta::none(),
        })
        .collect()
}
