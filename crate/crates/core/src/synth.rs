//! Parametric generator of labeled artifact-like EEG recordings.
//!
//! Each class owns a waveform template drawn once from the corpus seed, so
//! windows of one class share a phase-locked morphology while individual
//! events vary in amplitude and carry their own stochastic component. Events
//! are exactly one window long and sit on a pink-noise background.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    extract_windows, window_length, Annotation, ClassMap, DatasetError, Recording, Window,
    CANONICAL_CHANNELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    Burst,
    Step,
    Tremor,
    Rhythmic,
    SlowWave,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactTemplate {
    pub label: usize,
    pub name: String,
    /// Carrier range `[lo, hi)` in Hz.
    pub carrier: (f64, f64),
    pub envelope: Envelope,
    /// Per-channel gain in montage order. Electrode events override this
    /// with a one-hot vector per event.
    pub topography: Vec<f64>,
    /// Peak amplitude in µV.
    pub amplitude: f64,
}

/// Templates for the canonical five classes on the canonical montage.
pub fn canonical_templates() -> Vec<ArtifactTemplate> {
    // Fp1 Fp2 C3 C4 O1 O2 T3 T4
    let t = |label: usize, name: &str, carrier, envelope, topography: [f64; 8], amplitude| ArtifactTemplate {
        label,
        name: name.into(),
        carrier,
        envelope,
        topography: topography.to_vec(),
        amplitude,
    };
    vec![
        t(0, "muscle", (30.0, 100.0), Envelope::Burst, [0.15, 0.15, 0.3, 0.3, 0.1, 0.1, 1.0, 1.0], 30.0),
        t(1, "eye", (1.0, 4.0), Envelope::SlowWave, [1.0, 0.9, 0.25, 0.25, 0.05, 0.05, 0.15, 0.15], 50.0),
        t(2, "electrode", (0.5, 4.0), Envelope::Step, [1.0; 8], 45.0),
        t(3, "chewing", (20.0, 40.0), Envelope::Rhythmic, [0.5, 0.5, 0.2, 0.2, 0.15, 0.15, 1.0, 1.0], 35.0),
        t(4, "shiver", (8.0, 12.0), Envelope::Tremor, [0.8, 0.8, 1.0, 1.0, 0.9, 0.9, 0.85, 0.85], 25.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub window_seconds: f64,
    pub fs: f64,
    pub seed: u64,
    pub n_subjects: usize,
    /// Standard deviation of the pink background in µV.
    pub background_sigma: f64,
    /// Gap between events in seconds.
    pub gap_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            window_seconds: 1.0,
            fs: 250.0,
            seed: 0,
            n_subjects: 10,
            background_sigma: 8.0,
            gap_seconds: 0.5,
        }
    }
}

/// Class waveforms realized for a given window length, `C x L` each.
struct Realized {
    base: Vec<Vec<f64>>,
    rhythm_freq: f64,
    rhythm_phase: f64,
    /// Electrode step onset as a fraction of the window.
    step_onset: f64,
}

fn band_limited(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n_tones: usize) -> Vec<(f64, f64)> {
    (0..n_tones)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
        .collect()
}

fn tones_at(tones: &[(f64, f64)], t: f64) -> f64 {
    let norm = (2.0 / tones.len() as f64).sqrt();
    tones.iter().map(|(f, ph)| (2.0 * PI * f * t + ph).sin()).sum::<f64>() * norm
}

fn hann_env(i: usize, start: usize, width: usize) -> f64 {
    if i < start || i >= start + width {
        return 0.0;
    }
    let x = (i - start) as f64 / width as f64;
    0.5 * (1.0 - (2.0 * PI * x).cos())
}

fn rhythm_env(freq: f64, phase: f64, t: f64) -> f64 {
    (0.5 * (1.0 - (2.0 * PI * freq * t + phase).cos())).powi(2)
}

fn realize(templates: &[ArtifactTemplate], len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Realized {
    let c = CANONICAL_CHANNELS.len();
    let mut base = Vec::new();
    let rhythm_freq = rng.gen_range(1.2..1.8);
    let rhythm_phase = rng.gen_range(0.0..2.0 * PI);
    let mut step_onset = 0.3;
    for tpl in templates {
        let (lo, hi) = tpl.carrier;
        let hi = hi.min(0.45 * fs);
        let mut w = vec![0.0; c * len];
        match tpl.envelope {
            Envelope::Burst => {
                let tones = band_limited(rng, lo, hi, 24);
                let width = (0.7 * len as f64) as usize;
                let start = (len - width) / 2;
                for i in 0..len {
                    let v = tones_at(&tones, i as f64 / fs) * hann_env(i, start, width);
                    for ch in 0..c {
                        w[ch * len + i] = v * tpl.topography[ch];
                    }
                }
            }
            Envelope::SlowWave => {
                let f0 = rng.gen_range(lo.max(1.5)..hi.min(3.0));
                let ph = rng.gen_range(0.0..2.0 * PI);
                for i in 0..len {
                    let t = i as f64 / fs;
                    let v = (2.0 * PI * f0 * t + ph).sin() * (0.3 + 0.7 * hann_env(i, 0, len));
                    for ch in 0..c {
                        // Fp2 deflects against Fp1 at a smaller gain.
                        let sign = if ch == 1 { -1.0 } else { 1.0 };
                        w[ch * len + i] = sign * v * tpl.topography[ch];
                    }
                }
            }
            Envelope::Step => {
                // Realized per event; the template only fixes the onset.
                step_onset = rng.gen_range(0.25..0.4);
            }
            Envelope::Rhythmic => {
                let tones = band_limited(rng, lo, hi, 12);
                for i in 0..len {
                    let t = i as f64 / fs;
                    let env = rhythm_env(rhythm_freq, rhythm_phase, t);
                    let v = tones_at(&tones, t) * env;
                    for ch in 0..c {
                        w[ch * len + i] = v * tpl.topography[ch];
                    }
                }
            }
            Envelope::Tremor => {
                let f0 = rng.gen_range(lo.max(9.0)..hi.min(11.0));
                let phases: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.4..0.4)).collect();
                let ph = rng.gen_range(0.0..2.0 * PI);
                for i in 0..len {
                    let t = i as f64 / fs;
                    let am = 0.85 + 0.15 * (2.0 * PI * 0.7 * t).sin();
                    for ch in 0..c {
                        w[ch * len + i] = (2.0 * PI * f0 * t + ph + phases[ch]).sin() * am * tpl.topography[ch];
                    }
                }
            }
        }
        base.push(w);
    }
    Realized {
        base,
        rhythm_freq,
        rhythm_phase,
        step_onset,
    }
}

/// Gaussian noise shaped to a `1/f` power spectrum, scaled to unit standard
/// deviation. The DC bin is removed.
pub fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let f = k.min(n - k);
        *z = if f == 0 { Complex::new(0.0, 0.0) } else { *z / (f as f64).sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    x.iter().map(|v| (v - mean) / sd.max(f64::MIN_POSITIVE)).collect()
}

/// One event of class `tpl`, `C x L`, added onto `out`.
fn render_event(
    tpl: &ArtifactTemplate,
    realized: &Realized,
    len: usize,
    fs: f64,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    let c = CANONICAL_CHANNELS.len();
    let gain = tpl.amplitude * rng.gen_range(0.8..1.2);
    let base = &realized.base[tpl.label];
    match tpl.envelope {
        Envelope::Step => {
            let ch = rng.gen_range(0..c);
            let polarity = if ch % 2 == 0 { 1.0 } else { -1.0 };
            let onset = (realized.step_onset * len as f64) as usize;
            let tau = 0.3 * fs;
            let row = &mut out[ch * len..(ch + 1) * len];
            for (i, v) in row.iter_mut().enumerate().skip(onset) {
                let dt = (i - onset) as f64;
                let step = (-dt / tau).exp();
                let spike = 1.5 * (-dt / 1.5).exp();
                *v += polarity * gain * (step + spike);
            }
        }
        _ => {
            for (o, b) in out.iter_mut().zip(base) {
                *o += gain * b;
            }
            // Per-event variation in the same band, weaker than the template.
            let (lo, hi) = tpl.carrier;
            let tones = band_limited(rng, lo, hi.min(0.45 * fs), 8);
            for i in 0..len {
                let t = i as f64 / fs;
                let env = match tpl.envelope {
                    Envelope::Burst => hann_env(i, 0, len),
                    Envelope::Rhythmic => rhythm_env(realized.rhythm_freq, realized.rhythm_phase, t),
                    _ => 1.0,
                };
                let v = 0.25 * gain * tones_at(&tones, t) * env;
                for ch in 0..c {
                    out[ch * len + i] += v * tpl.topography[ch];
                }
            }
        }
    }
}

/// Builds one recording per subject; events are dealt to subjects
/// round-robin and separated by background-only gaps.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<Recording>, DatasetError> {
    if cfg.n_per_class == 0 || cfg.n_subjects == 0 {
        return Err(DatasetError::InvalidArgument(
            "n_per_class and n_subjects must be at least 1".into(),
        ));
    }
    if !(cfg.background_sigma >= 0.0) || !(cfg.gap_seconds >= 0.0) {
        return Err(DatasetError::InvalidArgument(
            "background_sigma and gap_seconds must be non-negative".into(),
        ));
    }
    let len = window_length(cfg.window_seconds, cfg.fs)?;
    let templates = canonical_templates();
    for tpl in &templates {
        if tpl.carrier.0 >= 0.45 * cfg.fs {
            return Err(DatasetError::InvalidArgument(format!(
                "{} carrier starts at {} Hz, above the usable band at fs = {}",
                tpl.name, tpl.carrier.0, cfg.fs
            )));
        }
    }
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
    let realized = realize(&templates, len, cfg.fs, &mut root);

    let k = templates.len();
    let mut per_subject: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_subjects];
    // Offsetting by the class keeps every class present in every subject
    // once n_per_class >= n_subjects.
    for i in 0..cfg.n_per_class {
        for class in 0..k {
            per_subject[(i + class) % cfg.n_subjects].push(class);
        }
    }

    let c = CANONICAL_CHANNELS.len();
    let gap = (cfg.gap_seconds * cfg.fs).round() as usize;
    let width = (cfg.n_subjects.max(2) - 1).to_string().len().max(2);
    let mut out = Vec::with_capacity(cfg.n_subjects);
    for (s, events) in per_subject.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64 + 1);
        let total = gap + events.len() * (len + gap);
        let mut data = Vec::with_capacity(c * total);
        for _ in 0..c {
            data.extend(pink_noise(total, &mut rng).into_iter().map(|v| v * cfg.background_sigma));
        }
        let mut annotations = Vec::with_capacity(events.len());
        let mut block = vec![0.0; c * len];
        for (j, &class) in events.iter().enumerate() {
            let start = gap + j * (len + gap);
            block.iter_mut().for_each(|v| *v = 0.0);
            render_event(&templates[class], &realized, len, cfg.fs, &mut rng, &mut block);
            for ch in 0..c {
                let dst = &mut data[ch * total + start..ch * total + start + len];
                for (d, b) in dst.iter_mut().zip(&block[ch * len..(ch + 1) * len]) {
                    *d += b;
                }
            }
            annotations.push(Annotation {
                start,
                end: start + len,
                label: templates[class].name.clone(),
            });
        }
        let subject_id = format!("s{:0width$}", s + 1);
        out.push(Recording {
            id: format!("synth_{subject_id}"),
            subject_id,
            fs: cfg.fs,
            channel_names: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
            data,
            annotations,
        });
    }
    Ok(out)
}

/// Unnormalized windows of a generated corpus, one per event, in recording
/// order.
pub fn generate_windows(cfg: &SynthConfig) -> Result<Vec<Window>, DatasetError> {
    let class_map = ClassMap::canonical();
    let mut out = Vec::new();
    for rec in generate_corpus(cfg)? {
        let ex = extract_windows(&rec, cfg.window_seconds, 0.0, &class_map, &CANONICAL_CHANNELS)?;
        debug_assert!(ex.rejections.is_empty());
        out.extend(ex.windows);
    }
    Ok(out)
}
