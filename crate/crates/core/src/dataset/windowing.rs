use serde::{Deserialize, Serialize};

use super::{ClassMap, DatasetError, NormMeta, Recording, Window, WindowSource};

// Absorbs representation error in products such as (1 - 0.9) * 500, which
// evaluates to 49.999...; the floors below are meant on exact reals.
const FLOOR_SLACK: f64 = 1e-9;

/// `L = floor(S * fs)`.
pub fn window_length(seconds: f64, fs: f64) -> Result<usize, DatasetError> {
    if !(seconds > 0.0) || !(fs > 0.0) || !seconds.is_finite() || !fs.is_finite() {
        return Err(DatasetError::InvalidArgument(format!(
            "window_seconds and fs must be positive, got {seconds} and {fs}"
        )));
    }
    let l = (seconds * fs + FLOOR_SLACK).floor() as usize;
    if l == 0 {
        return Err(DatasetError::ZeroLength { seconds, fs });
    }
    Ok(l)
}

/// `s = floor((1 - rho) * L)`, required to be at least 1.
pub fn stride(len: usize, rho: f64) -> Result<usize, DatasetError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(DatasetError::InvalidArgument(format!(
            "overlap must lie in [0, 1), got {rho}"
        )));
    }
    let s = ((1.0 - rho) * len as f64 + FLOOR_SLACK).floor() as usize;
    if s == 0 {
        return Err(DatasetError::OverlapTooHigh { rho, len });
    }
    Ok(s)
}

/// `N = max(0, floor((T - L) / s) + 1)`.
pub fn window_count(total: usize, len: usize, stride: usize) -> usize {
    assert!(len >= 1 && stride >= 1, "L and s must be positive");
    if total < len {
        0
    } else {
        (total - len) / stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub recording: String,
    /// Index into the recording's annotations, if the rejection concerns a
    /// single interval.
    pub annotation: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub windows: Vec<Window>,
    pub rejections: Vec<Rejection>,
}

/// Cuts every annotated interval into `L`-sample windows with stride `s`.
///
/// Channels are taken in `montage` order; a recording missing any of them
/// is rejected whole. Intervals shorter than `L` yield a single window with
/// the fragment at the start and zeros after it. Strided tails that do not
/// fill a window are dropped. Each annotation is windowed independently, so
/// overlapping labels produce separate windows.
pub fn extract_windows(
    rec: &Recording,
    seconds: f64,
    rho: f64,
    class_map: &ClassMap,
    montage: &[&str],
) -> Result<Extraction, DatasetError> {
    let len = window_length(seconds, rec.fs)?;
    let step = stride(len, rho)?;
    let mut out = Extraction::default();

    let mut rows = Vec::with_capacity(montage.len());
    for name in montage {
        match rec.channel_names.iter().position(|c| c == name) {
            Some(i) => rows.push(i),
            None => {
                out.rejections.push(Rejection {
                    recording: rec.id.clone(),
                    annotation: None,
                    reason: format!("missing channel {name}"),
                });
                return Ok(out);
            }
        }
    }
    let total = rec.len();

    for (ai, ann) in rec.annotations.iter().enumerate() {
        let reject = |reason: String| Rejection {
            recording: rec.id.clone(),
            annotation: Some(ai),
            reason,
        };
        let Some(label) = class_map.index_of(&ann.label) else {
            out.rejections.push(reject(format!("unknown label `{}`", ann.label)));
            continue;
        };
        if ann.start >= ann.end || ann.end > total {
            out.rejections.push(reject(format!(
                "interval [{}, {}) outside recording of {} samples",
                ann.start, ann.end, total
            )));
            continue;
        }
        let span = ann.end - ann.start;
        let n = window_count(span, len, step);
        let starts: Vec<usize> = if n == 0 {
            vec![ann.start]
        } else {
            (0..n).map(|i| ann.start + i * step).collect()
        };
        for start in starts {
            let take = len.min(ann.end - start);
            let mut data = Vec::with_capacity(rows.len() * len);
            for &r in &rows {
                let ch = rec.channel(r);
                data.extend_from_slice(&ch[start..start + take]);
                data.extend(std::iter::repeat(0.0).take(len - take));
            }
            out.windows.push(Window {
                data,
                channels: rows.len(),
                len,
                label,
                subject_id: rec.subject_id.clone(),
                source: WindowSource {
                    recording: rec.id.clone(),
                    start,
                },
                norm: NormMeta::none(),
            });
        }
    }
    Ok(out)
}
