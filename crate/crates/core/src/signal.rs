//! Deterministic signal-processing primitives: Welch PSD, band power,
//! autocorrelation, channel covariance and STFT magnitude.
//!
//! Everything is computed in f64.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("segment longer than signal ({nperseg} > {len})")]
    SegmentTooLong { nperseg: usize, len: usize },
    #[error("segment length must be positive")]
    ZeroSegment,
    #[error("overlap fraction must lie in [0, 1), got {0}")]
    BadOverlap(f64),
    #[error("sampling rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("signal must contain at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("signal contains non-finite samples")]
    NonFinite,
    #[error("band must satisfy lo < hi, got [{lo}, {hi})")]
    BadBand { lo: f64, hi: f64 },
    #[error("max lag {max_lag} must be smaller than the signal length {len}")]
    LagTooLarge { max_lag: usize, len: usize },
    #[error("hop must be at least 1")]
    ZeroHop,
    #[error("data length {len} is not a multiple of {channels} channels")]
    Ragged { len: usize, channels: usize },
}

/// One channel of samples at a fixed sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal1D {
    samples: Vec<f64>,
    fs: f64,
}

impl Signal1D {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self, SignalError> {
        if samples.is_empty() {
            return Err(SignalError::TooShort { need: 1, got: 0 });
        }
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(SignalError::BadSampleRate(fs));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite);
        }
        Ok(Self { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    Hann,
    Rectangular,
}

impl Taper {
    /// Periodic taper of length `n` (the DFT-even form used for spectral
    /// estimation).
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            Taper::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            Taper::Rectangular => vec![1.0; n],
        }
    }
}

/// Welch estimator settings. `nperseg = None` means `min(L, 256)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub nperseg: Option<usize>,
    pub overlap_frac: f64,
    pub taper: Taper,
    /// Remove each segment's mean before tapering.
    pub detrend: bool,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            nperseg: None,
            overlap_frac: 0.5,
            taper: Taper::Hann,
            detrend: true,
        }
    }
}

impl WelchConfig {
    pub fn segment_len(&self, len: usize) -> usize {
        self.nperseg.unwrap_or(len.min(256))
    }
}

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub nperseg: usize,
    pub noverlap: usize,
}

impl Psd {
    /// Bin spacing in Hz.
    pub fn df(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// Rectangle-rule integral over all bins.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.df()
    }

    pub fn same_grid(&self, other: &Psd) -> bool {
        self.freqs == other.freqs
    }
}

/// Welch's averaged periodogram with density scaling, so that the
/// integrated power of white noise approximates its variance.
pub fn welch_psd(x: &[f64], fs: f64, cfg: &WelchConfig) -> Result<Psd, SignalError> {
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(SignalError::BadSampleRate(fs));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite);
    }
    let nperseg = cfg.segment_len(x.len());
    if nperseg == 0 {
        return Err(SignalError::ZeroSegment);
    }
    if nperseg > x.len() {
        return Err(SignalError::SegmentTooLong {
            nperseg,
            len: x.len(),
        });
    }
    if !(0.0..1.0).contains(&cfg.overlap_frac) {
        return Err(SignalError::BadOverlap(cfg.overlap_frac));
    }
    let step = (((1.0 - cfg.overlap_frac) * nperseg as f64).floor() as usize).max(1);
    let window = cfg.taper.coefficients(nperseg);
    let win_ss: f64 = window.iter().map(|w| w * w).sum();
    let n_bins = nperseg / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nperseg);
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); nperseg];
    let mut segments = 0usize;
    let mut start = 0;
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let mean = if cfg.detrend {
            seg.iter().sum::<f64>() / nperseg as f64
        } else {
            0.0
        };
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((s - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (fs * win_ss * segments as f64);
    let mut power: Vec<f64> = acc.iter().map(|a| a * scale).collect();
    // One-sided: fold negative frequencies, except DC and (even n) Nyquist.
    let last_doubled = if nperseg % 2 == 0 { n_bins - 1 } else { n_bins };
    for p in power.iter_mut().take(last_doubled).skip(1) {
        *p *= 2.0;
    }
    let freqs = (0..n_bins).map(|k| k as f64 * fs / nperseg as f64).collect();
    Ok(Psd {
        freqs,
        power,
        nperseg,
        noverlap: nperseg - step,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl BandName {
    pub const ALL: [BandName; 5] = [
        BandName::Delta,
        BandName::Theta,
        BandName::Alpha,
        BandName::Beta,
        BandName::Gamma,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        }
    }
}

/// Half-open frequency band `[lo, hi)` in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub name: BandName,
    pub lo: f64,
    pub hi: f64,
}

impl BandSpec {
    pub fn new(name: BandName, lo: f64, hi: f64) -> Result<Self, SignalError> {
        if !(lo < hi) {
            return Err(SignalError::BadBand { lo, hi });
        }
        Ok(Self { name, lo, hi })
    }

    pub fn contains(&self, f: f64) -> bool {
        self.lo <= f && f < self.hi
    }
}

/// Clinical bands delta..gamma with the upper edges clipped to Nyquist.
pub fn canonical_bands(fs: f64) -> Vec<BandSpec> {
    let nyq = fs / 2.0;
    [
        (BandName::Delta, 0.5, 4.0),
        (BandName::Theta, 4.0, 8.0),
        (BandName::Alpha, 8.0, 13.0),
        (BandName::Beta, 13.0, 30.0),
        (BandName::Gamma, 30.0, 100.0),
    ]
    .into_iter()
    .map(|(name, lo, hi)| BandSpec {
        name,
        lo,
        hi: f64::min(hi, nyq).max(lo),
    })
    .collect()
}

/// Integrated band power and the number of bins it covered.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPower {
    pub power: f64,
    pub bins: usize,
}

impl BandPower {
    /// No PSD bin fell inside the band; `power` is 0.
    pub fn is_empty(&self) -> bool {
        self.bins == 0
    }
}

/// Rectangle-rule integral of `psd` over bins with `lo <= f < hi`.
pub fn band_power(psd: &Psd, band: &BandSpec) -> BandPower {
    let df = psd.df();
    let mut power = 0.0;
    let mut bins = 0;
    for (&f, &p) in psd.freqs.iter().zip(&psd.power) {
        if band.contains(f) {
            power += p * df;
            bins += 1;
        }
    }
    BandPower { power, bins }
}

/// Biased, normalized autocorrelation for lags `0..=max_lag`.
#[derive(Clone, Debug, PartialEq)]
pub struct Acf {
    pub values: Vec<f64>,
    /// Zero-variance input: lag 0 is 1, every other lag 0.
    pub degenerate: bool,
}

pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Acf, SignalError> {
    if max_lag >= x.len() {
        return Err(SignalError::LagTooLarge {
            max_lag,
            len: x.len(),
        });
    }
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    let mut values = vec![0.0; max_lag + 1];
    values[0] = 1.0;
    if denom == 0.0 {
        return Ok(Acf {
            values,
            degenerate: true,
        });
    }
    for (tau, slot) in values.iter_mut().enumerate().skip(1) {
        let s: f64 = centered[..n - tau]
            .iter()
            .zip(&centered[tau..])
            .map(|(a, b)| a * b)
            .sum();
        *slot = s / denom;
    }
    Ok(Acf {
        values,
        degenerate: false,
    })
}

/// Sample covariance across time of a channel-major `channels x L` block,
/// divisor `L - 1`. Returns a row-major `channels x channels` matrix.
pub fn channel_covariance(data: &[f64], channels: usize) -> Result<Vec<f64>, SignalError> {
    if channels == 0 || data.len() % channels != 0 {
        return Err(SignalError::Ragged {
            len: data.len(),
            channels,
        });
    }
    let l = data.len() / channels;
    if l < 2 {
        return Err(SignalError::TooShort { need: 2, got: l });
    }
    let centered: Vec<Vec<f64>> = data
        .chunks_exact(l)
        .map(|row| {
            let m = row.iter().sum::<f64>() / l as f64;
            row.iter().map(|v| v - m).collect()
        })
        .collect();
    let mut cov = vec![0.0; channels * channels];
    for i in 0..channels {
        for j in i..channels {
            let s: f64 = centered[i]
                .iter()
                .zip(&centered[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (l - 1) as f64;
            cov[i * channels + j] = s;
            cov[j * channels + i] = s;
        }
    }
    Ok(cov)
}

/// Magnitude short-time Fourier transform, `frames x bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Stft {
    pub frames: usize,
    pub bins: usize,
    pub magnitude: Vec<f64>,
}

impl Stft {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.magnitude[i * self.bins..(i + 1) * self.bins]
    }
}

/// Number of full STFT frames: `floor((L - nfft) / hop) + 1`.
pub fn stft_frame_count(len: usize, nfft: usize, hop: usize) -> usize {
    if nfft > len || hop == 0 {
        0
    } else {
        (len - nfft) / hop + 1
    }
}

/// Hann-windowed frame magnitudes `|X_k|` for `k = 0..=nfft/2`.
pub fn stft_magnitude(x: &[f64], nfft: usize, hop: usize) -> Result<Stft, SignalError> {
    if nfft == 0 {
        return Err(SignalError::ZeroSegment);
    }
    if nfft > x.len() {
        return Err(SignalError::SegmentTooLong {
            nperseg: nfft,
            len: x.len(),
        });
    }
    if hop == 0 {
        return Err(SignalError::ZeroHop);
    }
    let frames = stft_frame_count(x.len(), nfft, hop);
    let bins = nfft / 2 + 1;
    let window = Taper::Hann.coefficients(nfft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut magnitude = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + nfft];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        magnitude.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(Stft {
        frames,
        bins,
        magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    /// Direct O(N^2) DFT power of a tapered, mean-removed segment.
    fn dft_power(x: &[f64], taper: Taper) -> Vec<f64> {
        let n = x.len();
        let w = taper.coefficients(n);
        let m = x.iter().sum::<f64>() / n as f64;
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, (&v, &wt)) in x.iter().zip(&w).enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    re += (v - m) * wt * a.cos();
                    im += (v - m) * wt * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn zero_signal_has_zero_psd() {
        let psd = welch_psd(&[0.0; 250], 250.0, &WelchConfig::default()).unwrap();
        assert!(psd.power.iter().all(|&p| p == 0.0));
        for b in canonical_bands(250.0) {
            assert_eq!(band_power(&psd, &b).power, 0.0);
        }
    }

    #[test]
    fn ten_hz_peak_matches_dft_oracle() {
        let x = sine(10.0, 250.0, 250);
        let cfg = WelchConfig {
            nperseg: Some(250),
            ..Default::default()
        };
        let psd = welch_psd(&x, 250.0, &cfg).unwrap();
        let oracle = dft_power(&x, Taper::Hann);
        assert_eq!(argmax(&psd.power), argmax(&oracle));
        assert_eq!(psd.freqs[argmax(&psd.power)], 10.0);
    }

    #[test]
    fn parseval_single_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [64usize, 101, 250] {
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let cfg = WelchConfig {
                nperseg: Some(n),
                overlap_frac: 0.0,
                ..Default::default()
            };
            let psd = welch_psd(&x, 250.0, &cfg).unwrap();
            // Time-domain energy of the tapered, detrended segment.
            let w = Taper::Hann.coefficients(n);
            let m = x.iter().sum::<f64>() / n as f64;
            let e: f64 = x.iter().zip(&w).map(|(v, wt)| ((v - m) * wt).powi(2)).sum();
            let expected = e / w.iter().map(|a| a * a).sum::<f64>();
            let oracle_total: f64 = {
                let p = dft_power(&x, Taper::Hann);
                let two_sided: f64 = p[0]
                    + 2.0 * p[1..].iter().sum::<f64>()
                    - if n % 2 == 0 { p[n / 2] } else { 0.0 };
                two_sided / (n as f64 * w.iter().map(|a| a * a).sum::<f64>())
            };
            assert!((psd.total_power() - expected).abs() <= 1e-6 * expected);
            assert!((psd.total_power() - oracle_total).abs() <= 1e-6 * expected);
        }
    }

    #[test]
    fn errors() {
        let cfg = WelchConfig {
            nperseg: Some(300),
            ..Default::default()
        };
        assert_eq!(
            welch_psd(&[0.0; 250], 250.0, &cfg),
            Err(SignalError::SegmentTooLong {
                nperseg: 300,
                len: 250
            })
        );
        let cfg = WelchConfig {
            nperseg: Some(0),
            ..Default::default()
        };
        assert_eq!(welch_psd(&[0.0; 10], 250.0, &cfg), Err(SignalError::ZeroSegment));
        assert!(BandSpec::new(BandName::Alpha, 13.0, 8.0).is_err());
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
        assert!(stft_magnitude(&[0.0; 10], 16, 4).is_err());
        assert!(Signal1D::new(vec![f64::NAN], 1.0).is_err());
        assert!(Signal1D::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn band_power_sine_oracles() {
        let fs = 250.0;
        let bands = canonical_bands(fs);
        let bp = |x: &[f64]| -> Vec<f64> {
            let psd = welch_psd(x, fs, &WelchConfig::default()).unwrap();
            bands.iter().map(|b| band_power(&psd, b).power).collect()
        };
        let alpha = bp(&sine(10.0, fs, 1000));
        let psd = welch_psd(&sine(10.0, fs, 1000), fs, &WelchConfig::default()).unwrap();
        let above: f64 = psd
            .freqs
            .iter()
            .zip(&psd.power)
            .filter(|(f, _)| **f >= 0.5)
            .map(|(_, p)| p * psd.df())
            .sum();
        assert!(alpha[2] >= 0.95 * above);
        let delta = bp(&sine(2.0, fs, 1000));
        assert!(delta[0] >= 100.0 * delta[3]);
    }

    #[test]
    fn empty_band_flagged() {
        let psd = welch_psd(&sine(10.0, 250.0, 256), 250.0, &WelchConfig::default()).unwrap();
        let b = BandSpec::new(BandName::Delta, 0.1, 0.5).unwrap();
        let r = band_power(&psd, &b);
        assert!(r.is_empty());
        assert_eq!(r.power, 0.0);
    }

    #[test]
    fn gamma_clipped_to_nyquist() {
        let b = canonical_bands(100.0);
        assert_eq!(b[4].hi, 50.0);
        assert_eq!(b[0].lo, 0.5);
    }

    #[test]
    fn acf_sine_period() {
        let x = sine(10.0, 250.0, 2500);
        let acf = autocorrelation(&x, 30).unwrap();
        assert_eq!(acf.values[0], 1.0);
        assert!((acf.values[25] - 1.0).abs() < 0.05);
    }

    #[test]
    fn acf_constant_is_degenerate() {
        let acf = autocorrelation(&[3.0; 20], 5).unwrap();
        assert!(acf.degenerate);
        assert_eq!(acf.values, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn acf_white_noise_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let acf = autocorrelation(&x, 20).unwrap();
        assert!(acf.values[1..].iter().all(|r| r.abs() < 0.05));
    }

    #[test]
    fn covariance_properties() {
        let a = sine(3.0, 250.0, 100);
        let mut both = a.clone();
        both.extend_from_slice(&a);
        let c = channel_covariance(&both, 2).unwrap();
        assert!((c[1] - c[0]).abs() < 1e-12);
        let doubled: Vec<f64> = both.iter().map(|v| 2.0 * v).collect();
        let c2 = channel_covariance(&doubled, 2).unwrap();
        for (x, y) in c.iter().zip(&c2) {
            assert!((4.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_independent_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = channel_covariance(&data, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(c[i * 3 + j].abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn stft_cases() {
        let z = stft_magnitude(&[0.0; 300], 128, 32).unwrap();
        assert_eq!(z.frames, (300 - 128) / 32 + 1);
        assert!(z.magnitude.iter().all(|&m| m == 0.0));
        let c = stft_magnitude(&[1.0; 300], 128, 32).unwrap();
        for f in 0..c.frames {
            assert_eq!(argmax(c.frame(f)), 0);
        }
        let s = stft_magnitude(&sine(10.0, 250.0, 500), 128, 16).unwrap();
        let expected = (10.0f64 * 128.0 / 250.0).round() as usize;
        assert_eq!(expected, 5);
        for f in 0..s.frames {
            assert_eq!(argmax(s.frame(f)), expected);
        }
    }
}
