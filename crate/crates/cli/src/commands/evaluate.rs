use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use artifactgen_core::dataset::{read_window_file, NormMeta, Split, Window, WindowSource};
use artifactgen_core::metrics::{evaluate, WindowSet};
use clap::ValueEnum;

use crate::commands::sample::{Provenance, PROVENANCE_FILE};
use crate::commands::train::{load_manifest, manifest_root};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::record::{write_json, write_output, RunTimer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub real: PathBuf,
    pub split: SplitArg,
    /// `(origin, dir)`; the origin names the set in the report.
    pub fakes: Vec<(String, PathBuf)>,
    pub out: Option<PathBuf>,
}

/// `name=dir`, or a bare `dir` named after its last component.
pub fn parse_fake(arg: &str) -> Result<(String, PathBuf), String> {
    match arg.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.into(), dir.into())),
        Some(_) => Err(format!("`{arg}` is not NAME=DIR")),
        None => {
            let dir = PathBuf::from(arg);
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| format!("cannot name fake set `{arg}`"))?;
            Ok((name, dir))
        }
    }
}

fn load_fake(
    origin: &str,
    dir: &Path,
    channels: usize,
    len: usize,
) -> Result<(Vec<Window>, Option<Provenance>), CliError> {
    if !dir.is_dir() {
        return Err(CliError::user(format!("fake set `{origin}`: {} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "agw"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::user(format!("fake set `{origin}`: no *.agw files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = read_window_file(p)?;
        if f.channels as usize != channels || f.len as usize != len {
            return Err(CliError::user(format!(
                "{} is {}x{} but the real windows are {channels}x{len}",
                p.display(),
                f.channels,
                f.len
            )));
        }
        out.push(Window {
            data: f.data_f64(),
            channels,
            len,
            label: f.label as usize,
            subject_id: origin.into(),
            source: WindowSource {
                recording: p.file_name().unwrap().to_string_lossy().into_owned(),
                start: 0,
            },
            norm: NormMeta::none(),
        });
    }
    let prov_path = dir.join(PROVENANCE_FILE);
    let prov = if prov_path.exists() {
        let text = fs::read_to_string(&prov_path)?;
        Some(serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", prov_path.display())))?)
    } else {
        None
    };
    Ok((out, prov))
}

pub fn run(args: &EvaluateArgs) -> Result<PathBuf, CliError> {
    let timer = RunTimer::start("evaluate");
    let cfg = RunConfig::load(&args.config)?;
    let manifest = load_manifest(&args.real)?;
    let real_space = manifest.norm_scheme().ok_or_else(|| CliError::user("real manifest has no entries"))?;
    let real_windows = manifest.load_windows(manifest_root(&args.real), args.split.split())?;
    if real_windows.is_empty() {
        return Err(CliError::user(format!("the {:?} split of the real manifest is empty", args.split)));
    }
    let (c, l) = (real_windows[0].channels, real_windows[0].len);
    let real = WindowSet::new("real", real_space, real_windows)?;

    let mut seeds = BTreeMap::new();
    seeds.insert("run".to_string(), cfg.seed);
    let mut fakes = Vec::new();
    for (origin, dir) in &args.fakes {
        if origin == "real" || fakes.iter().any(|f: &WindowSet| &f.origin == origin) {
            return Err(CliError::user(format!("fake set name `{origin}` is used twice or reserved")));
        }
        let (windows, prov) = load_fake(origin, dir, c, l)?;
        let space = match &prov {
            Some(p) => {
                seeds.insert(origin.clone(), p.seed);
                p.norm_space
            }
            None => real_space,
        };
        fakes.push(WindowSet::new(origin, space, windows)?);
    }

    let report = evaluate(&real, &fakes, &cfg.eval_config(), manifest.class_map.len(), seeds)?;
    let dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("eval"));
    fs::create_dir_all(&dir)?;
    let outputs = vec![
        write_output(&dir, "report.json", (report.to_json() + "\n").as_bytes())?,
        write_output(&dir, "report.txt", report.to_table().as_bytes())?,
    ];
    print!("{}", report.to_table());
    let record = timer.finish(cfg.hash(), cfg.seed, outputs);
    write_json(&dir.join("run.json"), &record)?;
    Ok(dir)
}
