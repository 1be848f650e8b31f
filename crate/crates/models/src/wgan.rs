//! Conditional WGAN-GP.
//!
//! Architecture (kernel 9 unless noted, LeakyReLU 0.2 between layers):
//!
//! | stage | generator                        | critic                         |
//! |-------|----------------------------------|--------------------------------|
//! | 0     | linear `[z, onehot(y)] -> w0*L0` | conv `C -> w3`                 |
//! | 1     | conv^T stride 5, `w0 -> w1`      | conv k8 stride 2, `w3 -> w2`   |
//! | 2     | conv^T k8 stride 2, `w1 -> w2`   | conv stride 5, `w2 -> w1`      |
//! | 3     | conv `w2 -> w3`                  | conv `w1 -> w0`, mean over time|
//! | 4     | conv `w3 -> C`, crop, tanh       | `w^T phi + <phi, e_y>`         |
//!
//! with `L0 = ceil(L / 10)`, so `L = 250` needs no crop.

use std::io::Write;

use artifactgen_autodiff::checkpoint::Checkpoint;
use artifactgen_autodiff::nn::{global_avg_pool1d, Activation, Conv1d, ConvTranspose1d, Embedding, Linear};
use artifactgen_autodiff::{
    backward, functional, grad, grad_norm, no_grad, Adam, AdamConfig, AutodiffError, ModelParams,
    Tensor,
};
use artifactgen_core::signal::Taper;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{normal_tensor, one_hot, stream_rng, trailing_mean};
use crate::{DataShape, ModelError, WindowBatcher};

const INIT_STREAM_G: u64 = 1;
const INIT_STREAM_D: u64 = 2;
const TRAIN_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WganArch {
    pub latent_dim: usize,
    /// Channel progression before the output layer; `widths[0]` is also the
    /// critic feature width `h`.
    pub widths: [usize; 4],
    pub leaky_slope: f64,
}

impl Default for WganArch {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            widths: [128, 128, 64, 32],
            leaky_slope: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub params: ModelParams,
    pub arch: WganArch,
    pub shape: DataShape,
    seed_len: usize,
    fc: Linear,
    up1: ConvTranspose1d,
    up2: ConvTranspose1d,
    refine: Conv1d,
    out: Conv1d,
}

impl Generator {
    pub fn new(arch: &WganArch, shape: DataShape, rng: &mut impl Rng) -> Result<Self, ModelError> {
        shape.check()?;
        if arch.latent_dim == 0 || arch.widths.contains(&0) {
            return Err(ModelError::Config("generator widths and latent_dim must be positive".into()));
        }
        let [w0, w1, w2, w3] = arch.widths;
        let seed_len = shape.len.div_ceil(10);
        let mut p = ModelParams::new();
        let fc = Linear::new(&mut p, "g.fc", arch.latent_dim + shape.num_classes, w0 * seed_len, true, rng);
        let up1 = ConvTranspose1d::new(&mut p, "g.up1", w0, w1, 9, 5, 2, 0, rng);
        let up2 = ConvTranspose1d::new(&mut p, "g.up2", w1, w2, 8, 2, 3, 0, rng);
        let refine = Conv1d::new(&mut p, "g.refine", w2, w3, 9, 1, 4, rng);
        let out = Conv1d::new(&mut p, "g.out", w3, shape.channels, 9, 1, 4, rng);
        Ok(Self {
            params: p,
            arch: arch.clone(),
            shape,
            seed_len,
            fc,
            up1,
            up2,
            refine,
            out,
        })
    }

    /// `z: (B, d_z)` and one label per row; returns `(B, C, L)` in (-1, 1).
    pub fn forward(&self, p: &[Tensor], z: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        let b = labels.len();
        if z.shape() != [b, self.arch.latent_dim] {
            return Err(ModelError::Config(format!(
                "latent batch has shape {:?}, expected [{b}, {}]",
                z.shape(),
                self.arch.latent_dim
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.shape.num_classes) {
            return Err(ModelError::Config(format!("label {y} >= {}", self.shape.num_classes)));
        }
        let act = Activation::LeakyRelu(self.arch.leaky_slope);
        let input = Tensor::concat(&[z.clone(), one_hot(labels, self.shape.num_classes)], 1);
        let h = self.fc.forward(p, &input)?.reshape(&[b, self.arch.widths[0], self.seed_len]);
        let h = act.apply(&h);
        let h = act.apply(&self.up1.forward(p, &h)?);
        let h = act.apply(&self.up2.forward(p, &h)?);
        let h = act.apply(&self.refine.forward(p, &h)?);
        let h = self.out.forward(p, &h)?;
        let h = if h.shape()[2] == self.shape.len {
            h
        } else {
            h.slice(2, 0, self.shape.len)
        };
        Ok(h.tanh())
    }

    pub fn generate(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        no_grad(|| self.forward(self.params.tensors(), z, labels))
    }

    /// Draws fresh latents from `rng` and generates one window per label.
    pub fn sample(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor, ModelError> {
        let z = normal_tensor(&[labels.len(), self.arch.latent_dim], rng);
        self.generate(&z, labels)
    }
}

/// Pieces of a projection-critic score, each `(B,)` except `phi: (B, h)`.
#[derive(Clone, Debug)]
pub struct ScoreParts {
    pub phi: Tensor,
    pub linear: Tensor,
    pub projection: Tensor,
}

impl ScoreParts {
    pub fn score(&self) -> Tensor {
        self.linear.add(&self.projection)
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub params: ModelParams,
    pub shape: DataShape,
    pub activation: Activation,
    convs: [Conv1d; 4],
    pub head: Linear,
    pub embed: Embedding,
}

impl Critic {
    /// Fails when `activation` cannot be differentiated twice, since the
    /// gradient penalty backpropagates through the critic's input gradient.
    pub fn new(
        arch: &WganArch,
        shape: DataShape,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        shape.check()?;
        if !activation.supports_double_backward() {
            return Err(ModelError::Autodiff(AutodiffError::NotTwiceDifferentiable(
                "critic activation",
            )));
        }
        let [w0, w1, w2, w3] = arch.widths;
        let mut p = ModelParams::new();
        let convs = [
            Conv1d::new(&mut p, "d.conv0", shape.channels, w3, 9, 1, 4, rng),
            Conv1d::new(&mut p, "d.conv1", w3, w2, 8, 2, 3, rng),
            Conv1d::new(&mut p, "d.conv2", w2, w1, 9, 5, 2, rng),
            Conv1d::new(&mut p, "d.conv3", w1, w0, 9, 1, 4, rng),
        ];
        let head = Linear::new(&mut p, "d.head", w0, 1, false, rng);
        let embed = Embedding::new(&mut p, "d.embed", shape.num_classes, w0, 1.0 / (w0 as f64).sqrt(), rng);
        Ok(Self {
            params: p,
            shape,
            activation,
            convs,
            head,
            embed,
        })
    }

    pub fn features(&self, p: &[Tensor], x: &Tensor) -> Result<Tensor, ModelError> {
        let mut h = x.clone();
        for c in &self.convs {
            h = self.activation.apply(&c.forward(p, &h)?);
        }
        Ok(global_avg_pool1d(&h)?)
    }

    pub fn score_parts(&self, p: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<ScoreParts, ModelError> {
        let phi = self.features(p, x)?;
        let b = phi.shape()[0];
        if labels.len() != b {
            return Err(ModelError::Config(format!("{} labels for a batch of {b}", labels.len())));
        }
        let linear = self.head.forward(p, &phi)?.reshape(&[b]);
        let e = self.embed.forward(p, labels)?;
        let projection = phi.mul(&e).sum_axis_keep(1).reshape(&[b]);
        Ok(ScoreParts {
            phi,
            linear,
            projection,
        })
    }

    /// `D(x, y) = w^T phi(x) + <phi(x), e_y>`, shape `(B,)`.
    pub fn score(&self, p: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<Tensor, ModelError> {
        Ok(self.score_parts(p, x, labels)?.score())
    }
}

/// Gradient penalty for an arbitrary batch critic `score: (B, ...) -> (B,)`.
///
/// `x_hat = alpha_i * real_i + (1 - alpha_i) * fake_i`; the penalty is
/// `lambda * mean_i (||grad_{x_hat_i} D||_2 - 1)^2`, the norm taken over all
/// coordinates of sample `i`. The returned tensor stays differentiable with
/// respect to the critic's parameters. Also returns the per-sample norms.
pub fn gradient_penalty(
    score: impl Fn(&Tensor) -> Result<Tensor, ModelError>,
    real: &Tensor,
    fake: &Tensor,
    alpha: &[f64],
    lambda: f64,
) -> Result<(Tensor, Vec<f64>), ModelError> {
    if real.shape() != fake.shape() {
        return Err(ModelError::Config(format!(
            "real {:?} and fake {:?} batches differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let b = real.shape()[0];
    if alpha.len() != b {
        return Err(ModelError::Config(format!("{} interpolation weights for a batch of {b}", alpha.len())));
    }
    let per = real.numel() / b.max(1);
    let mut mixed = Vec::with_capacity(real.numel());
    for (i, &a) in alpha.iter().enumerate() {
        let r = &real.data()[i * per..(i + 1) * per];
        let f = &fake.data()[i * per..(i + 1) * per];
        mixed.extend(r.iter().zip(f).map(|(&r, &f)| a * r + (1.0 - a) * f));
    }
    let x_hat = Tensor::param(real.shape(), mixed);
    let total = score(&x_hat)?.sum();
    let g = grad(&total, &[&x_hat], true)?.remove(0);
    let norms = g.reshape(&[b, per]).square().sum_axis_keep(1).add_scalar(1e-12).sqrt();
    let norm_values = norms.data().to_vec();
    let penalty = norms.add_scalar(-1.0).square().mean().scale(lambda);
    Ok((penalty, norm_values))
}

/// Mean absolute difference of Hann-windowed STFT magnitudes, computed per
/// channel as a strided convolution with fixed cosine/sine kernels.
#[derive(Clone, Debug)]
pub struct SpectralL1 {
    pub nfft: usize,
    pub hop: usize,
    bins: usize,
    kernel: Tensor,
}

impl SpectralL1 {
    pub fn new(nfft: usize, hop: usize) -> Result<Self, ModelError> {
        if nfft < 2 || hop == 0 {
            return Err(ModelError::Config(format!("STFT needs nfft >= 2 and hop >= 1, got {nfft}/{hop}")));
        }
        let bins = nfft / 2 + 1;
        let w = Taper::Hann.coefficients(nfft);
        let mut k = Vec::with_capacity(2 * bins * nfft);
        for part in 0..2 {
            for f in 0..bins {
                for n in 0..nfft {
                    let ph = 2.0 * std::f64::consts::PI * (f * n) as f64 / nfft as f64;
                    k.push(w[n] * if part == 0 { ph.cos() } else { -ph.sin() });
                }
            }
        }
        Ok(Self {
            nfft,
            hop,
            bins,
            kernel: Tensor::from_vec(&[2 * bins, 1, nfft], k),
        })
    }

    /// `(B, C, L) -> (B * C, bins, frames)`.
    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let s = x.shape();
        if s.len() != 3 || s[2] < self.nfft {
            return Err(ModelError::Config(format!(
                "STFT of shape {s:?} needs (B, C, L >= {})",
                self.nfft
            )));
        }
        let flat = x.reshape(&[s[0] * s[1], 1, s[2]]);
        let spec = functional::conv1d(&flat, &self.kernel, self.hop, 0)
            .expect("length checked above");
        let re = spec.slice(1, 0, self.bins);
        let im = spec.slice(1, self.bins, self.bins);
        Ok(re.square().add(&im.square()).add_scalar(1e-12).sqrt())
    }

    pub fn loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor, ModelError> {
        if real.shape() != fake.shape() {
            return Err(ModelError::Config("spectral loss inputs differ in shape".into()));
        }
        Ok(self.magnitude(real)?.sub(&self.magnitude(fake)?).abs().mean())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub lambda_gp: f64,
    pub n_critic: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the STFT-L1 term in the generator loss; 0 turns it off.
    pub spectral_weight: f64,
    pub stft_nfft: usize,
    pub stft_hop: usize,
    /// Generator updates.
    pub steps: usize,
    pub seed: u64,
    /// Window of the running |g_loss| mean used to pick the best checkpoint.
    pub smoothing_window: usize,
    /// Stop after this many steps without a new best smoothed loss.
    pub patience: Option<usize>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            n_critic: 5,
            batch: 64,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            spectral_weight: 0.0,
            stft_nfft: 64,
            stft_hop: 16,
            steps: 2000,
            seed: 0,
            smoothing_window: 50,
            patience: None,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lambda_gp >= 0.0) {
            return bad("lambda_gp must be >= 0");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be >= 1");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.spectral_weight >= 0.0) {
            return bad("spectral_weight must be >= 0");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRow {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub spectral: f64,
}

pub fn write_gan_log(rows: &[GanLogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,d_loss,g_loss,gp,spectral")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.d_loss, r.g_loss, r.gp, r.spectral)?;
    }
    Ok(())
}

/// Generator and critic trained together.
#[derive(Clone, Debug)]
pub struct Wgan {
    pub generator: Generator,
    pub critic: Critic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WganMeta {
    kind: String,
    arch: WganArch,
    shape: DataShape,
}

impl Wgan {
    pub fn new(arch: &WganArch, shape: DataShape, seed: u64) -> Result<Self, ModelError> {
        let generator = Generator::new(arch, shape, &mut stream_rng(seed, INIT_STREAM_G))?;
        let critic = Critic::new(
            arch,
            shape,
            Activation::LeakyRelu(arch.leaky_slope),
            &mut stream_rng(seed, INIT_STREAM_D),
        )?;
        Ok(Self { generator, critic })
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let meta = WganMeta {
            kind: "wgan-gp".into(),
            arch: self.generator.arch.clone(),
            shape: self.generator.shape,
        };
        let mut ck = Checkpoint {
            step,
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            sections: Vec::new(),
        };
        ck.push_model("generator", &self.generator.params);
        ck.push_model("critic", &self.critic.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let meta: WganMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| ModelError::Config(format!("checkpoint meta: {e}")))?;
        if meta.kind != "wgan-gp" {
            return Err(ModelError::Config(format!("checkpoint holds a `{}` model", meta.kind)));
        }
        let mut m = Self::new(&meta.arch, meta.shape, 0)?;
        ck.load_model("generator", &mut m.generator.params)?;
        if ck.section("critic").is_some() {
            ck.load_model("critic", &mut m.critic.params)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct GanTrainOutcome {
    pub log: Vec<GanLogRow>,
    /// Step and generator values with the lowest smoothed |g_loss|.
    pub best_step: usize,
    pub best_generator: Vec<Vec<f64>>,
    pub stopped_early: bool,
}

fn check_finite(v: f64, what: &str, step: usize, diag: impl FnOnce() -> String) -> Result<(), ModelError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            what: what.into(),
            step,
            diagnostic: diag(),
        })
    }
}

/// Alternates `n_critic` critic updates with one generator update.
///
/// Critic loss `E[D(fake)] - E[D(real)] + GP`; generator loss
/// `-E[D(fake)] + spectral_weight * STFT-L1`. Fake labels are drawn from the
/// empirical label distribution. On return `model` holds the final weights.
pub fn train_wgan(
    model: &mut Wgan,
    data: &WindowBatcher,
    cfg: &GanTrainConfig,
) -> Result<GanTrainOutcome, ModelError> {
    cfg.validate()?;
    let shape = model.generator.shape;
    if data.channels() != shape.channels || data.window_len() != shape.len {
        return Err(ModelError::Data(format!(
            "windows are {}x{}, model expects {}x{}",
            data.channels(),
            data.window_len(),
            shape.channels,
            shape.len
        )));
    }
    if data.is_empty() {
        return Err(ModelError::Data("no training windows".into()));
    }
    let spectral = if cfg.spectral_weight > 0.0 {
        Some(SpectralL1::new(cfg.stft_nfft, cfg.stft_hop)?)
    } else {
        None
    };
    let mut opt_g = Adam::new(AdamConfig::adam(cfg.lr, cfg.beta1, cfg.beta2), &model.generator.params)?;
    let mut opt_d = Adam::new(AdamConfig::adam(cfg.lr, cfg.beta1, cfg.beta2), &model.critic.params)?;
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let dz = model.generator.arch.latent_dim;
    let (mut gnorm_g, mut gnorm_d) = (0.0, 0.0);
    let diag = |gg: f64, gd: f64| format!("lr={}, generator grad norm={gg:.4e}, critic grad norm={gd:.4e}", cfg.lr);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut abs_g = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize)> = None;
    let mut best_generator = model.generator.params.values();
    let mut best_step = 0;
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        let (mut d_loss_v, mut gp_v) = (0.0, 0.0);
        for _ in 0..cfg.n_critic {
            let (real, labels) = data.sample(cfg.batch, &mut rng);
            let z = normal_tensor(&[cfg.batch, dz], &mut rng);
            let fake = model.generator.generate(&z, &labels)?;
            let alpha: Vec<f64> = (0..cfg.batch).map(|_| rng.gen::<f64>()).collect();
            let p = model.critic.params.tensors();
            let critic = &model.critic;
            let d_real = critic.score(p, &real, &labels)?.mean();
            let d_fake = critic.score(p, &fake, &labels)?.mean();
            let (gp, _) = gradient_penalty(|x| critic.score(p, x, &labels), &real, &fake, &alpha, cfg.lambda_gp)?;
            let loss = d_fake.sub(&d_real).add(&gp);
            d_loss_v = loss.item();
            gp_v = gp.item();
            check_finite(d_loss_v, "critic loss", step, || diag(gnorm_g, gnorm_d))?;
            let grads = backward(&loss, p)?;
            gnorm_d = grad_norm(&grads);
            check_finite(gnorm_d, "critic gradient", step, || diag(gnorm_g, gnorm_d))?;
            opt_d.step(&mut model.critic.params, &grads)?;
        }

        let (real, labels) = data.sample(cfg.batch, &mut rng);
        let z = normal_tensor(&[cfg.batch, dz], &mut rng);
        let gp_params = model.generator.params.tensors();
        let fake = model.generator.forward(gp_params, &z, &labels)?;
        let d_fake = model
            .critic
            .score(&model.critic.params.tensors().iter().map(Tensor::detach).collect::<Vec<_>>(), &fake, &labels)?
            .mean();
        let adv = d_fake.neg();
        let (loss, spectral_v) = match &spectral {
            Some(s) => {
                let sl = s.loss(&real, &fake)?;
                let v = sl.item();
                (adv.add(&sl.scale(cfg.spectral_weight)), v)
            }
            None => (adv.clone(), 0.0),
        };
        let g_loss_v = adv.item();
        check_finite(loss.item(), "generator loss", step, || diag(gnorm_g, gnorm_d))?;
        let grads = backward(&loss, gp_params)?;
        gnorm_g = grad_norm(&grads);
        check_finite(gnorm_g, "generator gradient", step, || diag(gnorm_g, gnorm_d))?;
        opt_g.step(&mut model.generator.params, &grads)?;

        log.push(GanLogRow {
            step,
            d_loss: d_loss_v,
            g_loss: g_loss_v,
            gp: gp_v,
            spectral: spectral_v,
        });
        abs_g.push(g_loss_v.abs());
        if let Some(m) = trailing_mean(&abs_g, cfg.smoothing_window) {
            if best.map_or(true, |(b, _)| m < b) {
                best = Some((m, step));
                best_generator = model.generator.params.values();
                best_step = step;
            } else if let (Some(pat), Some((_, at))) = (cfg.patience, best) {
                if step - at >= pat {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if best.is_none() {
        best_generator = model.generator.params.values();
        best_step = log.len().saturating_sub(1);
    }
    Ok(GanTrainOutcome {
        log,
        best_step,
        best_generator,
        stopped_early,
    })
}
