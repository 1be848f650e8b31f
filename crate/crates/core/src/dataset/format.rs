use std::fs;
use std::path::Path;

use super::DatasetError;

pub const WINDOW_MAGIC: [u8; 4] = *b"AGW1";
const HEADER_LEN: usize = 16;

/// Contents of one `AGW1` window file: magic, little-endian `u32` C, L and
/// label, then `C * L` little-endian `f32` values, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowFile {
    pub channels: u32,
    pub len: u32,
    pub label: u32,
    pub data: Vec<f32>,
}

impl WindowFile {
    /// Narrows `f64` samples to the on-disk `f32` representation.
    pub fn from_f64(channels: usize, len: usize, label: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), channels * len, "window data must be C x L");
        Self {
            channels: channels as u32,
            len: len as u32,
            label: label as u32,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&WINDOW_MAGIC);
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.len.to_le_bytes());
        out.extend_from_slice(&self.label.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("file too short ({} bytes)", bytes.len()));
        }
        if bytes[..4] != WINDOW_MAGIC {
            return Err("bad magic, expected AGW1".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (channels, len, label) = (word(4), word(8), word(12));
        let n = channels as usize * len as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(format!(
                "expected {} payload bytes for {}x{}, found {}",
                4 * n,
                channels,
                len,
                body.len()
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            channels,
            len,
            label,
            data,
        })
    }
}

pub fn write_window_file(path: &Path, w: &WindowFile) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, w.to_bytes())?;
    Ok(())
}

pub fn read_window_file(path: &Path) -> Result<WindowFile, DatasetError> {
    let bytes = fs::read(path)?;
    WindowFile::from_bytes(&bytes).map_err(|msg| DatasetError::Format {
        path: path.display().to_string(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let w = WindowFile {
            channels: 2,
            len: 1,
            label: 3,
            data: vec![1.0, -2.5],
        };
        let b = w.to_bytes();
        assert_eq!(
            b,
            [
                b'A', b'G', b'W', b'1', 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0,
                0x20, 0xc0
            ]
        );
        assert_eq!(WindowFile::from_bytes(&b).unwrap(), w);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let w = WindowFile::from_f64(1, 3, 0, &[0.0, 1.0, 2.0]);
        let b = w.to_bytes();
        assert!(WindowFile::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[3] = b'2';
        assert!(WindowFile::from_bytes(&bad).is_err());
    }
}
