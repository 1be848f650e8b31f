use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use artifactgen_core::dataset::{
    assign_splits, extract_windows, minmax_normalize, parse_split_csv, validate_split,
    write_window_file, zscore_normalize, ClassMap, Manifest, ManifestEntry, NormScheme, Recording,
    Rejection, Window, WindowFile,
};
use artifactgen_core::synth::generate_corpus;
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::record::{write_json, write_output, RunTimer};

pub struct CurateArgs {
    pub config: PathBuf,
    pub input: Option<PathBuf>,
    pub synthetic: bool,
    pub out: Option<PathBuf>,
}

/// Manifest directory of a run: `<output_dir>/data`.
pub fn data_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("data"))
}

#[derive(Serialize)]
struct Rejections<'a> {
    rejections: &'a [Rejection],
}

pub fn run(args: &CurateArgs) -> Result<PathBuf, CliError> {
    let timer = RunTimer::start("curate");
    let cfg = RunConfig::load(&args.config)?;
    let class_map = match &cfg.data.class_map_csv {
        Some(p) => ClassMap::from_csv(&read_text(p)?)?,
        None => ClassMap::canonical(),
    };
    let recordings = match (&args.input, args.synthetic) {
        (Some(_), true) => return Err(CliError::user("pass either --input or --synthetic, not both")),
        (None, false) => return Err(CliError::user("one of --input or --synthetic is required")),
        (None, true) => generate_corpus(&cfg.synth_config())?,
        (Some(dir), false) => load_recordings(dir)?,
    };

    let (windows, rejections) = cut(&cfg, &recordings, &class_map)?;
    if windows.is_empty() {
        return Err(CliError::user("no windows were extracted; see the rejection log"));
    }
    for r in &rejections {
        warn!("rejected {} ({:?}): {}", r.recording, r.annotation, r.reason);
    }

    let subjects: Vec<String> = windows.iter().map(|w| w.subject_id.clone()).collect();
    let splits = match &cfg.data.split_csv {
        Some(p) => {
            let map = parse_split_csv(&read_text(p)?)?;
            if let Some(s) = subjects.iter().find(|s| !map.contains_key(*s)) {
                return Err(CliError::user(format!("subject `{s}` is missing from split CSV {}", p.display())));
            }
            map
        }
        None => assign_splits(&subjects, cfg.data.val_fraction, cfg.data.test_fraction, cfg.seed)?,
    };

    let dir = data_dir(&cfg, args.out.as_deref());
    fs::create_dir_all(dir.join("windows"))?;
    let mut manifest = Manifest::new(cfg.hash(), cfg.seed, class_map);
    let mut window_digest = Sha256::new();
    for (i, w) in windows.iter().enumerate() {
        let rel = format!("windows/{i:06}.agw");
        let file = WindowFile::from_f64(w.channels, w.len, w.label, &w.data);
        write_window_file(&dir.join(&rel), &file)?;
        window_digest.update(file.to_bytes());
        manifest.entries.push(ManifestEntry {
            path: rel,
            label: w.label,
            subject: w.subject_id.clone(),
            split: splits[&w.subject_id],
            len: w.len,
            norm: w.norm.clone(),
            source: Some(w.source.clone()),
        });
    }
    let report = validate_split(&manifest)?;
    for w in &report.warnings {
        warn!("{w}");
    }

    let mut outputs = vec![
        write_output(&dir, "manifest.json", manifest.to_json().as_bytes())?,
        ("windows/*.agw".into(), hex::encode(window_digest.finalize())),
    ];
    write_json(&dir.join("split_report.json"), &report)?;
    write_json(&dir.join("rejections.json"), &Rejections { rejections: &rejections })?;
    write_json(&dir.join("config.json"), &cfg)?;
    for name in ["split_report.json", "rejections.json", "config.json"] {
        outputs.push((name.into(), crate::record::sha256_hex(&fs::read(dir.join(name))?)));
    }
    let record = timer.finish(cfg.hash(), cfg.seed, outputs);
    write_json(&dir.join("run.json"), &record)?;
    info!("{} windows from {} recordings -> {}", windows.len(), recordings.len(), dir.display());
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::user(format!("cannot read {}: {e}", path.display())))
}

/// Every `*.json` file in `dir`, in file-name order, as a [`Recording`].
fn load_recordings(dir: &Path) -> Result<Vec<Recording>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::user(format!("input {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::user(format!("no *.json recordings in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let rec: Recording = serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
            if rec.channel_names.is_empty() || rec.data.len() % rec.channel_names.len() != 0 {
                return Err(CliError::user(format!("{}: data is not channels x samples", p.display())));
            }
            Ok(rec)
        })
        .collect()
}

fn cut(
    cfg: &RunConfig,
    recordings: &[Recording],
    class_map: &ClassMap,
) -> Result<(Vec<Window>, Vec<Rejection>), CliError> {
    let d = &cfg.data;
    let montage: Vec<&str> = d.channels.iter().map(String::as_str).collect();
    let mut windows = Vec::new();
    let mut rejections = Vec::new();
    let mut seen = BTreeMap::new();
    for rec in recordings {
        if seen.insert(rec.id.clone(), ()).is_some() {
            return Err(CliError::user(format!("recording id `{}` appears twice", rec.id)));
        }
        let reject = |reason: String| Rejection {
            recording: rec.id.clone(),
            annotation: None,
            reason,
        };
        if rec.fs != d.sample_rate {
            rejections.push(reject(format!("sample rate {} Hz, expected {}", rec.fs, d.sample_rate)));
            continue;
        }
        // Statistics are stored per montage channel, so reorder first. A
        // recording lacking a montage channel is left for the extractor to
        // reject.
        let source = select_montage(rec, &montage).unwrap_or_else(|| rec.clone());
        let (source, norm) = match d.normalization {
            NormScheme::ZscoreRecording => {
                if source.len() < 2 {
                    rejections.push(reject("fewer than 2 samples for z-scoring".into()));
                    continue;
                }
                let (z, meta) = zscore_normalize(&source);
                (z, Some(meta))
            }
            _ => (source, None),
        };
        let ex = extract_windows(&source, d.window_seconds, d.overlap, class_map, &montage)?;
        rejections.extend(ex.rejections);
        windows.extend(ex.windows.into_iter().map(|w| match (d.normalization, &norm) {
            (NormScheme::MinmaxWindow, _) => minmax_normalize(&w),
            (_, Some(meta)) => Window { norm: meta.clone(), ..w },
            _ => w,
        }));
    }
    Ok((windows, rejections))
}

fn select_montage(rec: &Recording, montage: &[&str]) -> Option<Recording> {
    let rows: Option<Vec<usize>> = montage
        .iter()
        .map(|m| rec.channel_names.iter().position(|c| c == m))
        .collect();
    let rows = rows?;
    Some(Recording {
        channel_names: montage.iter().map(|s| s.to_string()).collect(),
        data: rows.iter().flat_map(|&r| rec.channel(r).iter().copied()).collect(),
        ..rec.clone()
    })
}
