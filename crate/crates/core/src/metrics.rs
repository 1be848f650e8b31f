//! Distribution-level comparisons between sets of real and synthetic
//! windows. Windows are compared as flattened `C * L` vectors wherever a
//! representation is needed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{NormScheme, Window};
use crate::signal::{
    autocorrelation, band_power, canonical_bands, channel_covariance, welch_psd, BandSpec, Psd,
    SignalError, WelchConfig,
};

pub const REL_ERR_EPS: f64 = 1e-8;
pub const FEATURE_SPACE: &str = "flattened_raw_windows";
pub const KERNEL: &str = "rbf_median_heuristic";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("window set `{0}` is empty")]
    Empty(String),
    #[error("window set `{set}`: {msg}")]
    Shape { set: String, msg: String },
    #[error("window set `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("need at least {need} windows, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("PSD frequency grids differ")]
    GridMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric `{0}` is not finite")]
    NotFinite(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Nonempty set of equally shaped, finite windows.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub origin: String,
    pub space: NormScheme,
    windows: Vec<Window>,
}

impl WindowSet {
    pub fn new(origin: &str, space: NormScheme, windows: Vec<Window>) -> Result<Self, MetricError> {
        let Some(first) = windows.first() else {
            return Err(MetricError::Empty(origin.into()));
        };
        let (c, l) = (first.channels, first.len);
        for (i, w) in windows.iter().enumerate() {
            if w.channels != c || w.len != l || w.data.len() != c * l {
                return Err(MetricError::Shape {
                    set: origin.into(),
                    msg: format!(
                        "window {i} ({}) is {}x{}, expected {c}x{l}",
                        w.source.recording, w.channels, w.len
                    ),
                });
            }
            if !w.is_finite() {
                return Err(MetricError::NonFinite(origin.into()));
            }
        }
        Ok(Self {
            origin: origin.into(),
            space,
            windows,
        })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.windows[0].channels
    }

    pub fn window_len(&self) -> usize {
        self.windows[0].len
    }

    fn vectors(&self) -> Vec<&[f64]> {
        self.windows.iter().map(|w| w.data.as_slice()).collect()
    }
}

fn same_shape(a: &WindowSet, b: &WindowSet) -> Result<(), MetricError> {
    if a.channels() != b.channels() || a.window_len() != b.window_len() {
        return Err(MetricError::Shape {
            set: b.origin.clone(),
            msg: format!(
                "{}x{} does not match `{}` at {}x{}",
                b.channels(),
                b.window_len(),
                a.origin,
                a.channels(),
                a.window_len()
            ),
        });
    }
    Ok(())
}

/// Estimator settings shared by both sides of every comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fs: f64,
    pub welch: WelchConfig,
    pub bands: Vec<BandSpec>,
    pub max_lag: usize,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fs: 250.0,
            welch: WelchConfig::default(),
            bands: canonical_bands(250.0),
            max_lag: 50,
            knn_k: 5,
        }
    }
}

/// Mean over windows and channels of each band's integrated power.
pub fn mean_band_powers(set: &WindowSet, cfg: &EvalConfig) -> Result<Vec<f64>, MetricError> {
    let mut acc = vec![0.0; cfg.bands.len()];
    for w in set.windows() {
        for c in 0..w.channels {
            let psd = welch_psd(w.channel(c), cfg.fs, &cfg.welch)?;
            for (a, b) in acc.iter_mut().zip(&cfg.bands) {
                *a += band_power(&psd, b).power;
            }
        }
    }
    let n = (set.len() * set.channels()) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `|P_fake - P_real| / (P_real + eps)` per configured band.
pub fn bandwise_rel_err(real: &WindowSet, fake: &WindowSet, cfg: &EvalConfig) -> Result<Vec<f64>, MetricError> {
    same_shape(real, fake)?;
    let pr = mean_band_powers(real, cfg)?;
    let pf = mean_band_powers(fake, cfg)?;
    Ok(pr
        .iter()
        .zip(&pf)
        .map(|(r, f)| (f - r).abs() / (r + REL_ERR_EPS))
        .collect())
}

/// PSD averaged over channels, then over windows.
pub fn mean_psd(set: &WindowSet, cfg: &EvalConfig) -> Result<Psd, MetricError> {
    let mut out: Option<Psd> = None;
    for w in set.windows() {
        for c in 0..w.channels {
            let psd = welch_psd(w.channel(c), cfg.fs, &cfg.welch)?;
            match &mut out {
                None => out = Some(psd),
                Some(acc) => {
                    for (a, p) in acc.power.iter_mut().zip(&psd.power) {
                        *a += p;
                    }
                }
            }
        }
    }
    let mut psd = out.expect("set is nonempty");
    let n = (set.len() * set.channels()) as f64;
    psd.power.iter_mut().for_each(|p| *p /= n);
    Ok(psd)
}

/// Squared L2 distance between the two mean PSD vectors.
pub fn psd_l2_error(real: &WindowSet, fake: &WindowSet, cfg: &EvalConfig) -> Result<f64, MetricError> {
    let a = mean_psd(real, cfg)?;
    let b = mean_psd(fake, cfg)?;
    psd_l2_between(&a, &b)
}

pub fn psd_l2_between(a: &Psd, b: &Psd) -> Result<f64, MetricError> {
    if !a.same_grid(b) {
        return Err(MetricError::GridMismatch);
    }
    Ok(a.power.iter().zip(&b.power).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn channel_means(set: &WindowSet) -> Vec<f64> {
    let c = set.channels();
    let mut mu = vec![0.0; c];
    for w in set.windows() {
        for (ch, m) in mu.iter_mut().enumerate() {
            *m += w.channel(ch).iter().sum::<f64>();
        }
    }
    let n = (set.len() * set.window_len()) as f64;
    mu.iter().map(|m| m / n).collect()
}

/// Per-channel `mu_fake - mu_real` of grand means, and the mean of their
/// magnitudes.
pub fn channel_mean_discrepancy(real: &WindowSet, fake: &WindowSet) -> Result<(Vec<f64>, f64), MetricError> {
    if real.channels() != fake.channels() {
        return Err(MetricError::Shape {
            set: fake.origin.clone(),
            msg: format!("{} channels, expected {}", fake.channels(), real.channels()),
        });
    }
    let diff: Vec<f64> = channel_means(fake)
        .iter()
        .zip(channel_means(real))
        .map(|(f, r)| f - r)
        .collect();
    let effect = diff.iter().map(|d| d.abs()).sum::<f64>() / diff.len() as f64;
    Ok((diff, effect))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances among `points`.
pub fn median_pairwise_distance(points: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    pub value: f64,
    pub bandwidth: f64,
}

/// Unbiased MMD^2 U-statistic with `k(a, b) = exp(-|a - b|^2 / (2 sigma^2))`.
pub fn mmd_unbiased_with(x: &[&[f64]], y: &[&[f64]], sigma: f64) -> Result<f64, MetricError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(MetricError::TooFew {
            need: 2,
            got: x.len().min(y.len()),
        });
    }
    if !(sigma > 0.0) {
        return Err(MetricError::InvalidArgument(format!("bandwidth must be positive, got {sigma}")));
    }
    let g = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) * g).exp();
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(s[i], s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64)
}

/// [`mmd_unbiased_with`] at the median-heuristic bandwidth of the pooled
/// sample. A degenerate pool (all points equal) uses bandwidth 1.
pub fn mmd_unbiased(x: &WindowSet, y: &WindowSet) -> Result<Mmd, MetricError> {
    same_shape(x, y)?;
    let (xv, yv) = (x.vectors(), y.vectors());
    let pooled: Vec<&[f64]> = xv.iter().chain(&yv).copied().collect();
    let mut bandwidth = median_pairwise_distance(&pooled);
    if !(bandwidth > 0.0) {
        bandwidth = 1.0;
    }
    Ok(Mmd {
        value: mmd_unbiased_with(&xv, &yv, bandwidth)?,
        bandwidth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub value: f64,
    /// Pairs involving a constant window, whose correlation counts as 0.
    pub degenerate_pairs: usize,
}

/// `1 - mean pairwise Pearson correlation` of the flattened windows.
pub fn diversity(set: &WindowSet) -> Result<Diversity, MetricError> {
    let n = set.len();
    if n < 2 {
        return Err(MetricError::TooFew { need: 2, got: n });
    }
    let centered: Vec<(Vec<f64>, f64)> = set
        .windows()
        .iter()
        .map(|w| {
            let m = w.data.iter().sum::<f64>() / w.data.len() as f64;
            let z: Vec<f64> = w.data.iter().map(|v| v - m).collect();
            let ss = z.iter().map(|v| v * v).sum();
            (z, ss)
        })
        .collect();
    let mut total = 0.0;
    let mut degenerate_pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (a, sa) = &centered[i];
            let (b, sb) = &centered[j];
            if *sa == 0.0 || *sb == 0.0 {
                degenerate_pairs += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += dot / (sa * sb).sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(Diversity {
        value: 1.0 - total / pairs,
        degenerate_pairs,
    })
}

fn mean_covariance(set: &WindowSet) -> Result<Vec<f64>, MetricError> {
    let c = set.channels();
    let mut acc = vec![0.0; c * c];
    for w in set.windows() {
        for (a, v) in acc.iter_mut().zip(channel_covariance(&w.data, c)?) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / set.len() as f64).collect())
}

/// Frobenius distance between the set-averaged channel covariances.
pub fn cov_frobenius(real: &WindowSet, fake: &WindowSet) -> Result<f64, MetricError> {
    same_shape(real, fake)?;
    let a = mean_covariance(real)?;
    let b = mean_covariance(fake)?;
    Ok(sq_dist(&a, &b).sqrt())
}

fn mean_acf(set: &WindowSet, max_lag: usize) -> Result<Vec<f64>, MetricError> {
    let mut acc = vec![0.0; max_lag + 1];
    for w in set.windows() {
        for c in 0..w.channels {
            let r = autocorrelation(w.channel(c), max_lag)?;
            for (a, v) in acc.iter_mut().zip(&r.values) {
                *a += v;
            }
        }
    }
    let n = (set.len() * set.channels()) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// L2 distance between set- and channel-averaged autocorrelations.
pub fn acf_l2(real: &WindowSet, fake: &WindowSet, max_lag: usize) -> Result<f64, MetricError> {
    same_shape(real, fake)?;
    Ok(sq_dist(&mean_acf(real, max_lag)?, &mean_acf(fake, max_lag)?).sqrt())
}

/// Leave-one-out 1-NN accuracy at telling real from fake on the pooled set.
///
/// Candidates at distance exactly 0 from the query are excluded along with
/// the query itself, so a window duplicated across sets cannot vote for its
/// own copy. Equal distances go to the lower pooled index (real first).
pub fn one_nn_separability(real: &WindowSet, fake: &WindowSet) -> Result<f64, MetricError> {
    same_shape(real, fake)?;
    let pooled: Vec<(&[f64], bool)> = real
        .windows()
        .iter()
        .map(|w| (w.data.as_slice(), true))
        .chain(fake.windows().iter().map(|w| (w.data.as_slice(), false)))
        .collect();
    let n = pooled.len();
    if n < 4 {
        return Err(MetricError::TooFew { need: 4, got: n });
    }
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = sq_dist(pooled[i].0, pooled[j].0);
            if d == 0.0 {
                continue;
            }
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        if let Some((_, j)) = best {
            evaluated += 1;
            if pooled[j].1 == pooled[i].1 {
                correct += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(MetricError::InvalidArgument("all pooled windows are identical".into()));
    }
    Ok(correct as f64 / evaluated as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnRecovery {
    /// Accuracy per class index; `None` when the class is missing from the
    /// reference set or has no fake windows.
    pub per_class: Vec<Option<f64>>,
    pub macro_acc: Option<f64>,
    pub k: usize,
}

/// kNN fitted on labeled real windows, scored on the fake windows' labels.
/// Vote ties go to the tied label whose nearest member ranks first.
pub fn knn_class_recovery(
    real_train: &WindowSet,
    fake_eval: &WindowSet,
    k: usize,
    num_classes: usize,
) -> Result<KnnRecovery, MetricError> {
    same_shape(real_train, fake_eval)?;
    if k == 0 || k % 2 == 0 {
        return Err(MetricError::InvalidArgument(format!("k must be odd, got {k}")));
    }
    let refs = real_train.windows();
    let mut present = vec![false; num_classes];
    for w in refs {
        if w.label >= num_classes {
            return Err(MetricError::InvalidArgument(format!("label {} outside {num_classes} classes", w.label)));
        }
        present[w.label] = true;
    }
    let k = k.min(refs.len());
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for q in fake_eval.windows() {
        if q.label >= num_classes || !present[q.label] {
            continue;
        }
        let mut d: Vec<(f64, usize)> = refs
            .iter()
            .enumerate()
            .map(|(j, r)| (sq_dist(&q.data, &r.data), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_classes];
        let mut first_rank = vec![usize::MAX; num_classes];
        for (rank, &(_, j)) in d.iter().take(k).enumerate() {
            let l = refs[j].label;
            votes[l] += 1;
            first_rank[l] = first_rank[l].min(rank);
        }
        let pred = (0..num_classes)
            .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(first_rank[b].cmp(&first_rank[a])))
            .unwrap();
        totals[q.label] += 1;
        if pred == q.label {
            hits[q.label] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (present[c] && totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64))
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_acc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    Ok(KnnRecovery { per_class, macro_acc, k })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetInfo {
    pub origin: String,
    pub windows: usize,
    pub space: NormScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub welch: WelchConfig,
    pub fs: f64,
    pub bands: Vec<BandSpec>,
    pub kernel: String,
    pub feature_space: String,
    pub norm_space: NormScheme,
    pub max_lag: usize,
    pub knn_k: usize,
    pub seeds: BTreeMap<String, u64>,
    pub sets: Vec<SetInfo>,
}

/// Metrics of one fake set against the real set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    /// `rel_err_<band>` for every configured band.
    #[serde(flatten)]
    pub rel_err: BTreeMap<String, f64>,
    pub psd_l2: f64,
    pub mu_diff: Vec<f64>,
    pub mean_effect: f64,
    pub mmd_r: f64,
    pub diversity: f64,
    pub cov_frob: f64,
    pub acf_l2: f64,
    pub one_nn_acc: f64,
    pub knn_recovery: KnnRecovery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub metric: String,
    pub reason: String,
}

/// Paper-named summary fields; `None` entries are listed in `skipped`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub models: BTreeMap<String, ModelMetrics>,
    pub d_mu_diff: Option<Vec<f64>>,
    pub g_mu_diff: Option<Vec<f64>>,
    pub d_mean_effect: Option<f64>,
    pub g_mean_effect: Option<f64>,
    pub mmd_r_ddpm: Option<f64>,
    pub mmd_r_wgan: Option<f64>,
    pub mmd_ddpm_wgan: Option<f64>,
    pub diversity: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub metrics: Metrics,
    pub skipped: Vec<Skipped>,
}

fn model_metrics(real: &WindowSet, fake: &WindowSet, cfg: &EvalConfig, k: usize) -> Result<ModelMetrics, MetricError> {
    let rel = bandwise_rel_err(real, fake, cfg)?;
    let rel_err = cfg
        .bands
        .iter()
        .zip(rel)
        .map(|(b, v)| (format!("rel_err_{}", b.name.as_str()), v))
        .collect();
    let (mu_diff, mean_effect) = channel_mean_discrepancy(real, fake)?;
    Ok(ModelMetrics {
        rel_err,
        psd_l2: psd_l2_error(real, fake, cfg)?,
        mu_diff,
        mean_effect,
        mmd_r: mmd_unbiased(real, fake)?.value,
        diversity: diversity(fake)?.value,
        cov_frob: cov_frobenius(real, fake)?,
        acf_l2: acf_l2(real, fake, cfg.max_lag)?,
        one_nn_acc: one_nn_separability(real, fake)?,
        knn_recovery: knn_class_recovery(real, fake, cfg.knn_k, k)?,
    })
}

/// Full report for each fake set against `real`. Fake sets in a different
/// normalization space than `real` are skipped with a reason. Sets whose
/// origin is `ddpm` or `wgan` also fill the paper-named summary fields.
pub fn evaluate(
    real: &WindowSet,
    fakes: &[WindowSet],
    cfg: &EvalConfig,
    num_classes: usize,
    seeds: BTreeMap<String, u64>,
) -> Result<MetricReport, MetricError> {
    let mut models = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut div = BTreeMap::new();
    div.insert(real.origin.clone(), diversity(real)?.value);
    let mut accepted: BTreeMap<String, &WindowSet> = BTreeMap::new();
    for f in fakes {
        if f.space != real.space {
            skipped.push(Skipped {
                metric: format!("models.{}", f.origin),
                reason: format!(
                    "set is in {} space but the real set is in {} space",
                    f.space.as_str(),
                    real.space.as_str()
                ),
            });
            continue;
        }
        let m = model_metrics(real, f, cfg, num_classes)?;
        div.insert(f.origin.clone(), m.diversity);
        models.insert(f.origin.clone(), m);
        accepted.insert(f.origin.clone(), f);
    }

    let mut pick = |name: &str, model: &str| -> Option<&ModelMetrics> {
        let m = models.get(model);
        if m.is_none() {
            skipped.push(Skipped {
                metric: name.into(),
                reason: format!("no comparable `{model}` set"),
            });
        }
        m
    };
    let d_mu_diff = pick("d_mu_diff", "ddpm").map(|m| m.mu_diff.clone());
    let g_mu_diff = pick("g_mu_diff", "wgan").map(|m| m.mu_diff.clone());
    let d_mean_effect = pick("d_mean_effect", "ddpm").map(|m| m.mean_effect);
    let g_mean_effect = pick("g_mean_effect", "wgan").map(|m| m.mean_effect);
    let mmd_r_ddpm = pick("mmd_r_ddpm", "ddpm").map(|m| m.mmd_r);
    let mmd_r_wgan = pick("mmd_r_wgan", "wgan").map(|m| m.mmd_r);
    let mmd_ddpm_wgan = match (accepted.get("ddpm"), accepted.get("wgan")) {
        (Some(d), Some(g)) => Some(mmd_unbiased(d, g)?.value),
        _ => {
            skipped.push(Skipped {
                metric: "mmd_ddpm_wgan".into(),
                reason: "needs both `ddpm` and `wgan` sets".into(),
            });
            None
        }
    };

    let mut sets = vec![SetInfo {
        origin: real.origin.clone(),
        windows: real.len(),
        space: real.space,
    }];
    sets.extend(fakes.iter().map(|f| SetInfo {
        origin: f.origin.clone(),
        windows: f.len(),
        space: f.space,
    }));
    let report = MetricReport {
        meta: ReportMeta {
            welch: cfg.welch,
            fs: cfg.fs,
            bands: cfg.bands.clone(),
            kernel: KERNEL.into(),
            feature_space: FEATURE_SPACE.into(),
            norm_space: real.space,
            max_lag: cfg.max_lag,
            knn_k: cfg.knn_k,
            seeds,
            sets,
        },
        metrics: Metrics {
            models,
            d_mu_diff,
            g_mu_diff,
            d_mean_effect,
            g_mean_effect,
            mmd_r_ddpm,
            mmd_r_wgan,
            mmd_ddpm_wgan,
            diversity: div,
        },
        skipped,
    };
    report.check_finite()?;
    Ok(report)
}

impl MetricReport {
    fn check_finite(&self) -> Result<(), MetricError> {
        let bad = |name: String, v: f64| if v.is_finite() { Ok(()) } else { Err(MetricError::NotFinite(name)) };
        for (name, m) in &self.metrics.models {
            for (k, v) in &m.rel_err {
                bad(format!("{name}.{k}"), *v)?;
            }
            for (k, v) in [
                ("psd_l2", m.psd_l2),
                ("mean_effect", m.mean_effect),
                ("mmd_r", m.mmd_r),
                ("diversity", m.diversity),
                ("cov_frob", m.cov_frob),
                ("acf_l2", m.acf_l2),
                ("one_nn_acc", m.one_nn_acc),
            ] {
                bad(format!("{name}.{k}"), v)?;
            }
            for v in &m.mu_diff {
                bad(format!("{name}.mu_diff"), *v)?;
            }
        }
        if let Some(v) = self.metrics.mmd_ddpm_wgan {
            bad("mmd_ddpm_wgan".into(), v)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text summary: band errors per model, MMD pairs,
    /// diversity and per-channel mean differences.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let names: Vec<&String> = self.metrics.models.keys().collect();
        let _ = writeln!(s, "feature space: {}, norm space: {}", self.meta.feature_space, self.meta.norm_space.as_str());
        let _ = write!(s, "{:<16}", "metric");
        for n in &names {
            let _ = write!(s, "{:>14}", n);
        }
        s.push('\n');
        let mut row = |label: &str, f: &dyn Fn(&ModelMetrics) -> Option<f64>| {
            let _ = write!(s, "{label:<16}");
            for n in &names {
                match f(&self.metrics.models[*n]) {
                    Some(v) => {
                        let _ = write!(s, "{v:>14.6}");
                    }
                    None => {
                        let _ = write!(s, "{:>14}", "-");
                    }
                }
            }
            s.push('\n');
        };
        for b in &self.meta.bands {
            let key = format!("rel_err_{}", b.name.as_str());
            row(&key, &|m| m.rel_err.get(&key).copied());
        }
        row("psd_l2", &|m| Some(m.psd_l2));
        row("mmd_r", &|m| Some(m.mmd_r));
        row("diversity", &|m| Some(m.diversity));
        row("cov_frob", &|m| Some(m.cov_frob));
        row("acf_l2", &|m| Some(m.acf_l2));
        row("one_nn_acc", &|m| Some(m.one_nn_acc));
        row("knn_macro", &|m| m.knn_recovery.macro_acc);
        row("mean_effect", &|m| Some(m.mean_effect));
        if let Some(c) = self.metrics.models.values().next().map(|m| m.mu_diff.len()) {
            for ch in 0..c {
                row(&format!("mu_diff[{ch}]"), &|m| Some(m.mu_diff[ch]));
            }
        }
        if let Some(v) = self.metrics.mmd_ddpm_wgan {
            let _ = writeln!(s, "{:<16}{v:>14.6}", "mmd_ddpm_wgan");
        }
        let _ = writeln!(s, "{:<16}{:>14.6}", "diversity_real", self.metrics.diversity.get("real").copied().unwrap_or(f64::NAN));
        for sk in &self.skipped {
            let _ = writeln!(s, "skipped {}: {}", sk.metric, sk.reason);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::WindowSource;

    fn win(data: Vec<f64>, channels: usize, label: usize) -> Window {
        let len = data.len() / channels;
        Window {
            data,
            channels,
            len,
            label,
            subject_id: "s".into(),
            source: WindowSource {
                recording: "r".into(),
                start: 0,
            },
            norm: crate::dataset::NormMeta::none(),
        }
    }

    fn set(ws: Vec<Window>) -> WindowSet {
        WindowSet::new("real", NormScheme::None, ws).unwrap()
    }

    #[test]
    fn rejects_ragged_and_nonfinite() {
        assert!(WindowSet::new("x", NormScheme::None, vec![]).is_err());
        let r = WindowSet::new("x", NormScheme::None, vec![win(vec![0.0; 4], 2, 0), win(vec![0.0; 6], 2, 0)]);
        assert!(matches!(r, Err(MetricError::Shape { .. })));
        let r = WindowSet::new("x", NormScheme::None, vec![win(vec![f64::NAN; 4], 2, 0)]);
        assert!(matches!(r, Err(MetricError::NonFinite(_))));
    }

    #[test]
    fn diversity_of_negated_pair_is_two() {
        let w: Vec<f64> = (0..50).map(|i| ((i * 7 % 13) as f64).ln_1p() - 0.3).collect();
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let d = diversity(&set(vec![win(w.clone(), 1, 0), win(neg, 1, 0)])).unwrap();
        assert_eq!(d.value, 2.0);
        let copies = diversity(&set(vec![win(w.clone(), 1, 0); 4])).unwrap();
        assert!(copies.value.abs() < 1e-15);
    }

    #[test]
    fn constant_window_counts_as_uncorrelated() {
        let d = diversity(&set(vec![win(vec![1.0; 8], 1, 0), win((0..8).map(f64::from).collect(), 1, 0)])).unwrap();
        assert_eq!(d.degenerate_pairs, 1);
        assert_eq!(d.value, 1.0);
    }

    #[test]
    fn channel_shift_is_reported_on_that_channel() {
        let a: Vec<Window> = (0..5).map(|i| win((0..12).map(|j| (i * j) as f64).collect(), 3, 0)).collect();
        let b: Vec<Window> = a
            .iter()
            .map(|w| {
                let mut w = w.clone();
                w.data[..4].iter_mut().for_each(|v| *v += 0.5);
                w
            })
            .collect();
        let (diff, effect) = channel_mean_discrepancy(&set(a.clone()), &set(b.clone())).unwrap();
        assert!((diff[0] - 0.5).abs() < 1e-12);
        assert!(diff[1].abs() < 1e-12 && diff[2].abs() < 1e-12);
        assert!((effect - 0.5 / 3.0).abs() < 1e-12);
        let (back, _) = channel_mean_discrepancy(&set(b), &set(a)).unwrap();
        assert!((back[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn knn_needs_odd_k_and_marks_missing_classes() {
        let a = set(vec![win(vec![0.0, 0.0], 1, 0), win(vec![5.0, 5.0], 1, 1)]);
        assert!(knn_class_recovery(&a, &a, 2, 3).is_err());
        let r = knn_class_recovery(&a, &a, 1, 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.macro_acc, Some(1.0));
    }
}
