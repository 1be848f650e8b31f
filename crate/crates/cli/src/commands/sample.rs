use std::path::PathBuf;

use artifactgen_autodiff::checkpoint::Checkpoint;
use artifactgen_autodiff::Tensor;
use artifactgen_core::dataset::{write_window_file, NormScheme, WindowFile};
use artifactgen_models::ddpm::{Ddpm, SamplerConfig};
use artifactgen_models::wgan::Wgan;
use artifactgen_models::DataShape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::train::ModelKind;
use crate::config::seed_from_env;
use crate::error::CliError;
use crate::record::{sha256_hex, write_json, write_output, RunTimer};

pub const PROVENANCE_FILE: &str = "provenance.json";

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub class: usize,
    pub num: usize,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub eta: Option<f64>,
    pub clip_x0: Option<f64>,
    pub batch: usize,
}

/// Sidecar describing how a directory of generated windows was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_kind: String,
    pub model_sha256: String,
    pub checkpoint_step: u64,
    pub class: usize,
    pub num: usize,
    pub seed: u64,
    pub sampler: Option<SamplerConfig>,
    pub norm_space: NormScheme,
    pub channels: usize,
    pub len: usize,
}

enum Loaded {
    Gan(Wgan),
    Ddpm(Ddpm),
}

impl Loaded {
    fn shape(&self) -> DataShape {
        match self {
            Loaded::Gan(m) => m.generator.shape,
            Loaded::Ddpm(m) => m.shape(),
        }
    }

    fn kind(&self) -> ModelKind {
        match self {
            Loaded::Gan(_) => ModelKind::Gan,
            Loaded::Ddpm(_) => ModelKind::Ddpm,
        }
    }
}

fn load(bytes: &[u8], path: &std::path::Path) -> Result<(Checkpoint, Loaded), CliError> {
    let ck = Checkpoint::from_bytes(bytes)
        .map_err(|e| CliError::user(format!("{}: not a valid checkpoint: {e}", path.display())))?;
    let meta: serde_json::Value = serde_json::from_str(&ck.meta)
        .map_err(|e| CliError::user(format!("{}: checkpoint meta: {e}", path.display())))?;
    let model = match meta.get("kind").and_then(|k| k.as_str()) {
        Some("wgan-gp") => Loaded::Gan(Wgan::from_checkpoint(&ck)?),
        Some("ddpm") => Loaded::Ddpm(Ddpm::from_checkpoint(&ck)?),
        other => return Err(CliError::user(format!("{}: unknown model kind {other:?}", path.display()))),
    };
    Ok((ck, model))
}

pub fn run(args: &SampleArgs) -> Result<PathBuf, CliError> {
    let timer = RunTimer::start("sample");
    let bytes = std::fs::read(&args.checkpoint)
        .map_err(|e| CliError::user(format!("cannot read checkpoint {}: {e}", args.checkpoint.display())))?;
    let (ck, model) = load(&bytes, &args.checkpoint)?;
    let shape = model.shape();
    if args.class >= shape.num_classes {
        return Err(CliError::user(format!(
            "class {} is out of range: the model has {} classes (0..={})",
            args.class,
            shape.num_classes,
            shape.num_classes - 1
        )));
    }
    if args.num == 0 || args.batch == 0 {
        return Err(CliError::user("--num and --batch must be at least 1"));
    }
    let seed = match args.seed {
        Some(s) => s,
        None => seed_from_env()?.unwrap_or(0),
    };
    let sampler = match &model {
        Loaded::Ddpm(_) => {
            let d = SamplerConfig::default();
            Some(SamplerConfig {
                num_steps: args.steps.unwrap_or(d.num_steps),
                guidance: args.guidance.unwrap_or(d.guidance),
                eta: args.eta.unwrap_or(d.eta),
                clip_x0: args.clip_x0.or(d.clip_x0),
            })
        }
        Loaded::Gan(_) => {
            if args.steps.is_some() || args.guidance.is_some() || args.eta.is_some() || args.clip_x0.is_some() {
                return Err(CliError::user("--steps, --guidance, --eta and --clip-x0 apply to DDPM checkpoints only"));
            }
            None
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(&args.out)?;
    let mut digest = Sha256::new();
    let mut written = 0;
    while written < args.num {
        let n = args.batch.min(args.num - written);
        let labels = vec![args.class; n];
        let x: Tensor = match (&model, &sampler) {
            (Loaded::Gan(m), _) => m.generator.sample(&labels, &mut rng)?,
            (Loaded::Ddpm(m), Some(s)) => m.sample(&labels, s, &mut rng)?,
            (Loaded::Ddpm(_), None) => unreachable!("sampler set for DDPM above"),
        };
        let per = shape.channels * shape.len;
        for i in 0..n {
            let file = WindowFile::from_f64(shape.channels, shape.len, args.class, &x.data()[i * per..(i + 1) * per]);
            write_window_file(&args.out.join(format!("{:06}.agw", written + i)), &file)?;
            digest.update(file.to_bytes());
        }
        written += n;
    }

    let prov = Provenance {
        model_kind: model.kind().as_str().into(),
        model_sha256: sha256_hex(&bytes),
        checkpoint_step: ck.step,
        class: args.class,
        num: args.num,
        seed,
        sampler,
        norm_space: model.kind().required_norm(),
        channels: shape.channels,
        len: shape.len,
    };
    let prov_json = serde_json::to_string_pretty(&prov).map_err(|e| CliError::internal(e.to_string()))? + "\n";
    let outputs = vec![
        ("*.agw".to_string(), hex::encode(digest.finalize())),
        write_output(&args.out, PROVENANCE_FILE, prov_json.as_bytes())?,
    ];
    // The invocation itself plays the role of the config here.
    let record = timer.finish(sha256_hex(serde_json::to_string(&(&prov, args.batch)).unwrap().as_bytes()), seed, outputs);
    write_json(&args.out.join("run.json"), &record)?;
    Ok(args.out.clone())
}
