//! Strictly parsed YAML run configuration.
//!
//! Unknown keys anywhere are rejected. The top-level `seed` is the only
//! seed: it drives the synthetic corpus, split assignment, model
//! initialization and training, and `ARTIFACTGEN_SEED` overrides it.

use std::path::{Path, PathBuf};

use artifactgen_core::dataset::{Manifest, NormScheme, CANONICAL_CHANNELS, CANONICAL_FS};
use artifactgen_core::metrics::{EvalConfig, KERNEL};
use artifactgen_core::signal::{canonical_bands, BandSpec, WelchConfig};
use artifactgen_core::synth::SynthConfig;
use artifactgen_models::ddpm::{DiffusionTrainConfig, ScheduleConfig, UNetConfig};
use artifactgen_models::wgan::{GanTrainConfig, WganArch};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "ARTIFACTGEN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filtering {
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Montage, in storage order.
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub overlap: f64,
    pub window_seconds: f64,
    pub normalization: NormScheme,
    pub filtering: Filtering,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// `subject_id,split` CSV; overrides seeded assignment.
    pub split_csv: Option<PathBuf>,
    /// `label_name,index` CSV; the canonical five classes otherwise.
    pub class_map_csv: Option<PathBuf>,
    pub synthetic: SyntheticBlock,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
            sample_rate: CANONICAL_FS,
            overlap: 0.5,
            window_seconds: 1.0,
            normalization: NormScheme::MinmaxWindow,
            filtering: Filtering::Raw,
            val_fraction: 0.2,
            test_fraction: 0.2,
            split_csv: None,
            class_map_csv: None,
            synthetic: SyntheticBlock::default(),
        }
    }
}

/// Oracle corpus parameters used by `curate --synthetic`. Window length and
/// sample rate come from the data block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBlock {
    pub n_per_class: usize,
    pub n_subjects: usize,
    pub background_sigma: f64,
    pub gap_seconds: f64,
}

impl Default for SyntheticBlock {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_per_class: d.n_per_class,
            n_subjects: d.n_subjects,
            background_sigma: d.background_sigma,
            gap_seconds: d.gap_seconds,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gan: GanBlock,
    pub ddpm: DdpmBlock,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanBlock {
    pub arch: WganArch,
    pub train: GanTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmBlock {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub train: DiffusionTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    pub bands: Vec<BandSpec>,
    pub welch: WelchConfig,
    /// Only the RBF kernel with median-heuristic bandwidth is implemented.
    pub kernel: String,
    pub max_lag: usize,
    pub knn_k: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            bands: canonical_bands(CANONICAL_FS),
            welch: d.welch,
            kernel: KERNEL.into(),
            max_lag: d.max_lag,
            knn_k: d.knn_k,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| CliError::user(format!("config: {e}")))?;
        for path in [["gan", "train"], ["ddpm", "train"]] {
            let block = raw.get("model").and_then(|m| m.get(path[0])).and_then(|m| m.get(path[1]));
            if block.and_then(|b| b.get("seed")).is_some() {
                return Err(CliError::user(format!(
                    "config: model.{}.{}.seed is not allowed; set the top-level `seed`",
                    path[0], path[1]
                )));
            }
        }
        let cfg: RunConfig = serde_yaml::from_value(raw).map_err(|e| CliError::user(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies `ARTIFACTGEN_SEED` if set.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(seed) = seed_from_env()? {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        let bad = |m: String| Err(CliError::user(format!("config: {m}")));
        if d.channels.is_empty() {
            return bad("data.channels is empty".into());
        }
        if !(d.sample_rate > 0.0) || !(d.window_seconds > 0.0) {
            return bad("data.sample_rate and data.window_seconds must be positive".into());
        }
        if !(0.0..1.0).contains(&d.overlap) {
            return bad(format!("data.overlap must lie in [0, 1), got {}", d.overlap));
        }
        if let Some(b) = self.eval.bands.iter().find(|b| !(b.lo < b.hi)) {
            return bad(format!("eval band {} has lo >= hi", b.name.as_str()));
        }
        if self.eval.kernel != KERNEL {
            return bad(format!("eval.kernel `{}` is not supported (only `{KERNEL}`)", self.eval.kernel));
        }
        self.model.gan.train.validate().map_err(|e| CliError::user(format!("config: model.gan.train: {e}")))?;
        self.model.ddpm.train.validate().map_err(|e| CliError::user(format!("config: model.ddpm.train: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization of the resolved config.
    pub fn hash(&self) -> String {
        Manifest::hash_config(&self.canonical_json())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fs: self.data.sample_rate,
            welch: self.eval.welch,
            bands: self.eval.bands.clone(),
            max_lag: self.eval.max_lag,
            knn_k: self.eval.knn_k,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.data.synthetic;
        SynthConfig {
            n_per_class: s.n_per_class,
            window_seconds: self.data.window_seconds,
            fs: self.data.sample_rate,
            seed: self.seed,
            n_subjects: s.n_subjects,
            background_sigma: s.background_sigma,
            gap_seconds: s.gap_seconds,
        }
    }

    pub fn gan_train(&self) -> GanTrainConfig {
        GanTrainConfig {
            seed: self.seed,
            ..self.model.gan.train.clone()
        }
    }

    pub fn ddpm_train(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            seed: self.seed,
            ..self.model.ddpm.train.clone()
        }
    }
}

pub fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::user(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("output_dir: out\n").unwrap();
        assert_eq!(cfg.data.channels.len(), 8);
        assert_eq!(cfg.model.gan.train.n_critic, 5);
        assert_eq!(cfg.eval.bands.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for text in [
            "output_dir: o\nsed: 1\n",
            "output_dir: o\ndata:\n  overlapp: 0.5\n",
            "output_dir: o\nmodel:\n  gan:\n    train:\n      lamda_gp: 10\n",
            "output_dir: o\neval:\n  welch:\n    segment: 3\n",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn nested_seeds_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("output_dir: o\nmodel:\n  ddpm:\n    train:\n      seed: 3\n").is_err());
        assert!(RunConfig::parse("output_dir: o\ndata:\n  overlap: 1.0\n").is_err());
        assert!(RunConfig::parse("output_dir: o\ndata:\n  filtering: bandpass\n").is_err());
        assert!(RunConfig::parse("output_dir: o\neval:\n  kernel: laplace\n").is_err());
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = RunConfig::parse("output_dir: o\nseed: 4\n").unwrap();
        let b = RunConfig::parse("seed:   4\n\noutput_dir: 'o'\n").unwrap();
        let c = RunConfig::parse("output_dir: o\nseed: 5\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
