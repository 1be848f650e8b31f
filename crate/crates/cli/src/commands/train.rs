use std::path::{Path, PathBuf};

use artifactgen_core::dataset::{Manifest, NormScheme, Split};
use artifactgen_models::ddpm::{train_ddpm, write_diffusion_log, Ddpm};
use artifactgen_models::wgan::{train_wgan, write_gan_log, Wgan};
use artifactgen_models::{DataShape, WindowBatcher};
use clap::ValueEnum;
use log::info;

use crate::commands::curate::data_dir;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::record::{write_json, write_output, RunTimer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gan,
    Ddpm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gan => "gan",
            ModelKind::Ddpm => "ddpm",
        }
    }

    /// The GAN's tanh output matches min-max windows; the diffusion model's
    /// Gaussian prior matches z-scored recordings.
    pub fn required_norm(self) -> NormScheme {
        match self {
            ModelKind::Gan => NormScheme::MinmaxWindow,
            ModelKind::Ddpm => NormScheme::ZscoreRecording,
        }
    }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub model: ModelKind,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.exists() {
        return Err(CliError::user(format!("manifest {} does not exist", path.display())));
    }
    Ok(Manifest::load(path)?)
}

pub fn manifest_root(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn run(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let timer = RunTimer::start(&format!("train {}", args.model.as_str()));
    let cfg = RunConfig::load(&args.config)?;
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| data_dir(&cfg, None).join("manifest.json"));
    let manifest = load_manifest(&manifest_path)?;
    let scheme = manifest.norm_scheme().ok_or_else(|| CliError::user("manifest has no entries"))?;
    let need = args.model.required_norm();
    if scheme != need {
        return Err(CliError::user(format!(
            "the {} model trains on {} windows but {} holds {} windows; curate with \
             `normalization: {}` (min-max pairs with the GAN, z-score with the DDPM)",
            args.model.as_str(),
            need.as_str(),
            manifest_path.display(),
            scheme.as_str(),
            need.as_str()
        )));
    }
    let windows = manifest.load_windows(manifest_root(&manifest_path), Some(Split::Train))?;
    if windows.is_empty() {
        return Err(CliError::user("the train split is empty"));
    }
    let k = manifest.class_map.len();
    let data = WindowBatcher::new(&windows, k)?;
    let shape = DataShape {
        channels: data.channels(),
        len: data.window_len(),
        num_classes: k,
    };
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(args.model.as_str()));
    std::fs::create_dir_all(&dir)?;
    info!("training {} on {} windows of {}x{}", args.model.as_str(), data.len(), shape.channels, shape.len);

    let mut outputs = Vec::new();
    let mut csv = Vec::new();
    match args.model {
        ModelKind::Gan => {
            let train = cfg.gan_train();
            let mut model = Wgan::new(&cfg.model.gan.arch, shape, cfg.seed)?;
            let out = train_wgan(&mut model, &data, &train)?;
            write_gan_log(&out.log, &mut csv)?;
            let last = out.log.len() as u64;
            outputs.push(write_output(&dir, "model.agck", &model.to_checkpoint(last).to_bytes())?);
            model.generator.params.load_values(&out.best_generator).map_err(|e| CliError::internal(e.to_string()))?;
            outputs.push(write_output(&dir, "best.agck", &model.to_checkpoint(out.best_step as u64).to_bytes())?);
            info!("best step {} (stopped early: {})", out.best_step, out.stopped_early);
        }
        ModelKind::Ddpm => {
            let train = cfg.ddpm_train();
            let b = &cfg.model.ddpm;
            let mut model = Ddpm::new(&b.unet, &b.schedule, shape, cfg.seed)?;
            let out = train_ddpm(&mut model, &data, &train)?;
            write_diffusion_log(&out.log, &mut csv)?;
            let last = out.log.len() as u64;
            outputs.push(write_output(&dir, "model.agck", &model.to_checkpoint(last).to_bytes())?);
            model
                .net
                .params
                .set_ema_values(train.ema_decay, &out.best_ema)
                .map_err(|e| CliError::internal(e.to_string()))?;
            outputs.push(write_output(&dir, "best.agck", &model.to_checkpoint(out.best_step as u64).to_bytes())?);
            info!("best step {} (stopped early: {})", out.best_step, out.stopped_early);
        }
    }
    outputs.push(write_output(&dir, "loss.csv", &csv)?);
    write_json(&dir.join("config.json"), &cfg)?;
    let record = timer.finish(cfg.hash(), cfg.seed, outputs);
    write_json(&dir.join("run.json"), &record)?;
    Ok(dir)
}
