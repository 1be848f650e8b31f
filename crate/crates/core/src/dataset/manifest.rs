use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    read_window_file, ClassMap, DatasetError, NormMeta, NormScheme, NormStats, Split, Window,
    WindowSource,
};

pub const MANIFEST_VERSION: u32 = 1;

/// Serialized form of [`NormMeta`]: `{scheme, stats}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub scheme: NormScheme,
    pub stats: NormStats,
}

impl From<NormMeta> for NormRecord {
    fn from(m: NormMeta) -> Self {
        Self {
            scheme: m.scheme(),
            stats: m.stats,
        }
    }
}

impl TryFrom<NormRecord> for NormMeta {
    type Error = String;

    fn try_from(r: NormRecord) -> Result<Self, String> {
        let meta = NormMeta { stats: r.stats };
        if meta.scheme() != r.scheme {
            return Err(format!(
                "norm scheme `{}` does not match its statistics",
                r.scheme.as_str()
            ));
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
    pub subject: String,
    pub split: Split,
    #[serde(rename = "L")]
    pub len: usize,
    pub norm: NormMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<WindowSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub class_map: ClassMap,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(config_hash: String, seed: u64, class_map: ClassMap) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config_hash,
            seed,
            class_map,
            entries: Vec::new(),
        }
    }

    /// Hex SHA-256 of a canonical configuration serialization.
    pub fn hash_config(canonical: &str) -> String {
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// The common window length, or `None` for an empty manifest.
    pub fn window_len(&self) -> Option<usize> {
        self.entries.first().map(|e| e.len)
    }

    pub fn norm_scheme(&self) -> Option<NormScheme> {
        self.entries.first().map(|e| e.norm.scheme())
    }

    pub fn check(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| DatasetError::Format {
            path: "manifest".into(),
            msg,
        };
        if self.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if let Some(l) = self.window_len() {
            if let Some(e) = self.entries.iter().find(|e| e.len != l) {
                return Err(bad(format!("{} has L = {}, expected {}", e.path, e.len, l)));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| e.label >= self.class_map.len()) {
            return Err(bad(format!("{} has label {} outside class map", e.path, e.label)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        m.check()?;
        Ok(m)
    }

    /// Reads the windows of `split` (all splits when `None`), resolving
    /// paths against `root`.
    pub fn load_windows(&self, root: &Path, split: Option<Split>) -> Result<Vec<Window>, DatasetError> {
        let mut out = Vec::new();
        for e in &self.entries {
            if split.is_some_and(|s| s != e.split) {
                continue;
            }
            let path: PathBuf = root.join(&e.path);
            let f = read_window_file(&path)?;
            let mismatch = |what: &str| DatasetError::Format {
                path: path.display().to_string(),
                msg: format!("{what} differs from manifest entry"),
            };
            if f.len as usize != e.len {
                return Err(mismatch("window length"));
            }
            if f.label as usize != e.label {
                return Err(mismatch("label"));
            }
            out.push(Window {
                data: f.data_f64(),
                channels: f.channels as usize,
                len: e.len,
                label: e.label,
                subject_id: e.subject.clone(),
                source: e.source.clone().unwrap_or(WindowSource {
                    recording: e.path.clone(),
                    start: 0,
                }),
                norm: e.norm.clone(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let mut m = Manifest::new(Manifest::hash_config("a: 1\n"), 7, ClassMap::canonical());
        m.entries.push(ManifestEntry {
            path: "windows/train/000000.agw".into(),
            label: 2,
            subject: "s01".into(),
            split: Split::Train,
            len: 250,
            norm: NormMeta {
                stats: NormStats::MinmaxWindow {
                    min: -1.5,
                    max: 2.0,
                    eps: 1e-8,
                    degenerate: false,
                },
            },
            source: None,
        });
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let e = &v["entries"][0];
        assert_eq!(e["L"], 250);
        assert_eq!(e["split"], "train");
        assert_eq!(e["norm"]["scheme"], "minmax_window");
        assert_eq!(e["norm"]["stats"]["eps"], 1e-8);
        assert_eq!(v["class_map"][1]["name"], "eye");
        let back: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn scheme_must_match_stats() {
        let text = r#"{"scheme":"zscore_recording","stats":{"min":0.0,"max":1.0,"eps":1e-8,"degenerate":false}}"#;
        assert!(serde_json::from_str::<NormMeta>(text).is_err());
        let none = r#"{"scheme":"none","stats":null}"#;
        assert_eq!(serde_json::from_str::<NormMeta>(none).unwrap(), NormMeta::none());
    }
}
