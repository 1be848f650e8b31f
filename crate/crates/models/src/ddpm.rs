//! Conditional DDPM with epsilon prediction, a FiLM-conditioned 1-D U-Net,
//! classifier-free guidance and a DDIM sampler.

use std::io::Write;

use artifactgen_autodiff::checkpoint::Checkpoint;
use artifactgen_autodiff::nn::{film, Activation, Conv1d, ConvTranspose1d, Embedding, GroupNorm, Linear};
use artifactgen_autodiff::{backward, grad_norm, no_grad, Adam, AdamConfig, ModelParams, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::{normal_tensor, stream_rng, trailing_mean};
use crate::{DataShape, ModelError, WindowBatcher};

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 3;

/// Linear variance schedule. Index `t` runs over `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl BetaSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self, ModelError> {
        let (t, b1, bt) = (cfg.steps, cfg.beta_start, cfg.beta_end);
        if t == 0 || !(0.0 < b1 && b1 <= bt && bt < 1.0) {
            return Err(ModelError::Config(format!(
                "schedule needs T >= 1 and 0 < beta_1 <= beta_T < 1, got T={t}, betas {b1}..{bt}"
            )));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| if t == 1 { b1 } else { b1 + (bt - b1) * i as f64 / (t - 1) as f64 })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<(), ModelError> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::Config(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, with one timestep per
    /// batch row.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor, ModelError> {
        if x0.shape() != eps.shape() {
            return Err(ModelError::Config(format!(
                "x0 {:?} and noise {:?} differ in shape",
                x0.shape(),
                eps.shape()
            )));
        }
        let b = x0.shape().first().copied().unwrap_or(0);
        if t.len() != b {
            return Err(ModelError::Config(format!("{} timesteps for a batch of {b}", t.len())));
        }
        for &ti in t {
            self.check_t(ti)?;
        }
        let mut bshape = vec![1; x0.shape().len()];
        bshape[0] = b;
        let a = Tensor::from_vec(&bshape, t.iter().map(|&ti| self.alpha_bar(ti).sqrt()).collect());
        let s = Tensor::from_vec(&bshape, t.iter().map(|&ti| (1.0 - self.alpha_bar(ti)).sqrt()).collect());
        Ok(x0.mul(&a).add(&eps.mul(&s)))
    }
}

/// Nonlinearity inside the U-Net. Diffusion training needs only first
/// derivatives, so the fused SiLU is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetActivation {
    Silu,
    FusedSilu,
}

impl UNetActivation {
    fn layer(self) -> Activation {
        match self {
            UNetActivation::Silu => Activation::Silu,
            UNetActivation::FusedSilu => Activation::FusedSilu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel width per resolution level; the depth is the number of levels.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    /// Width of the fused timestep + class vector.
    pub cond_dim: usize,
    /// Upper bound on group-norm groups; each layer uses `gcd(groups, C)`.
    pub groups: usize,
    pub activation: UNetActivation,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            time_dim: 128,
            cond_dim: 128,
            groups: 8,
            activation: UNetActivation::FusedSilu,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sinusoidal embedding `[sin(t w_j), cos(t w_j)]`, `w_j = 10000^(-j/half)`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let row_start = data.len();
        for j in 0..half {
            let w = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push((ti as f64 * w).sin());
        }
        for j in 0..half {
            let w = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            data.push((ti as f64 * w).cos());
        }
        data.resize(row_start + dim, 0.0);
    }
    Tensor::from_vec(&[t.len(), dim], data)
}

/// GN -> act -> conv, then GN -> FiLM -> act -> conv, plus a 1x1 skip when
/// the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv1d,
    gn2: GroupNorm,
    pub film: Linear,
    conv2: Conv1d,
    skip: Option<Conv1d>,
    out_channels: usize,
}

impl ResBlock {
    fn new(
        p: &mut ModelParams,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            gn1: GroupNorm::new(p, &format!("{name}.gn1"), gcd(cfg.groups, cin), cin),
            conv1: Conv1d::new(p, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            gn2: GroupNorm::new(p, &format!("{name}.gn2"), gcd(cfg.groups, cout), cout),
            film: Linear::new(p, &format!("{name}.film"), cfg.cond_dim, 2 * cout, true, rng),
            conv2: Conv1d::new(p, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
            skip: (cin != cout).then(|| Conv1d::new(p, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
            out_channels: cout,
        }
    }

    /// `cond` is the activated conditioning vector `(B, cond_dim)`; `None`
    /// runs the same block without modulation.
    pub fn forward(
        &self,
        p: &[Tensor],
        x: &Tensor,
        cond: Option<&Tensor>,
        act: Activation,
    ) -> Result<Tensor, ModelError> {
        let h = self.conv1.forward(p, &act.apply(&self.gn1.forward(p, x)?))?;
        let mut h = self.gn2.forward(p, &h)?;
        if let Some(c) = cond {
            let m = self.film.forward(p, c)?;
            let gamma = m.slice(1, 0, self.out_channels).add_scalar(1.0);
            let beta = m.slice(1, self.out_channels, self.out_channels);
            h = film(&h, &gamma, &beta)?;
        }
        let h = self.conv2.forward(p, &act.apply(&h))?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip))
    }
}

/// Noise predictor `eps(x_t, t, y)`; `y == num_classes` is the null label.
pub trait EpsilonModel {
    fn predict(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError>;
}

#[derive(Clone, Debug)]
pub struct UNet1D {
    pub params: ModelParams,
    pub config: UNetConfig,
    pub shape: DataShape,
    time_fc1: Linear,
    time_fc2: Linear,
    pub class_embed: Embedding,
    input: Conv1d,
    pub down_blocks: Vec<ResBlock>,
    downs: Vec<Conv1d>,
    pub mid: ResBlock,
    ups: Vec<ConvTranspose1d>,
    pub up_blocks: Vec<ResBlock>,
    out_norm: GroupNorm,
    output: Conv1d,
}

impl UNet1D {
    pub fn new(cfg: &UNetConfig, shape: DataShape, rng: &mut impl Rng) -> Result<Self, ModelError> {
        shape.check()?;
        if cfg.widths.is_empty() || cfg.widths.contains(&0) {
            return Err(ModelError::Config("U-Net widths must be non-empty and positive".into()));
        }
        if cfg.time_dim < 2 || cfg.cond_dim == 0 || cfg.groups == 0 {
            return Err(ModelError::Config("time_dim >= 2, cond_dim >= 1 and groups >= 1 required".into()));
        }
        let mut p = ModelParams::new();
        let time_fc1 = Linear::new(&mut p, "u.time1", cfg.time_dim, cfg.cond_dim, true, rng);
        let time_fc2 = Linear::new(&mut p, "u.time2", cfg.cond_dim, cfg.cond_dim, true, rng);
        let class_embed = Embedding::new(&mut p, "u.class", shape.num_classes + 1, cfg.cond_dim, 1.0, rng);
        let w0 = cfg.widths[0];
        let input = Conv1d::new(&mut p, "u.in", shape.channels, w0, 3, 1, 1, rng);
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut ch = w0;
        for (i, &w) in cfg.widths.iter().enumerate() {
            down_blocks.push(ResBlock::new(&mut p, &format!("u.down{i}"), ch, w, cfg, rng));
            downs.push(Conv1d::new(&mut p, &format!("u.pool{i}"), w, w, 4, 2, 1, rng));
            ch = w;
        }
        let mid = ResBlock::new(&mut p, "u.mid", ch, ch, cfg, rng);
        let mut ups = Vec::new();
        let mut up_blocks = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate().rev() {
            ups.push(ConvTranspose1d::new(&mut p, &format!("u.unpool{i}"), ch, ch, 4, 2, 1, 0, rng));
            up_blocks.push(ResBlock::new(&mut p, &format!("u.up{i}"), ch + w, w, cfg, rng));
            ch = w;
        }
        let out_norm = GroupNorm::new(&mut p, "u.out_norm", gcd(cfg.groups, ch), ch);
        let output = Conv1d::new(&mut p, "u.out", ch, shape.channels, 3, 1, 1, rng);
        Ok(Self {
            params: p,
            config: cfg.clone(),
            shape,
            time_fc1,
            time_fc2,
            class_embed,
            input,
            down_blocks,
            downs,
            mid,
            ups,
            up_blocks,
            out_norm,
            output,
        })
    }

    pub fn depth(&self) -> usize {
        self.config.widths.len()
    }

    /// Length the input is zero-padded to (at the end) so that every
    /// stride-2 stage divides evenly; the output is cropped back.
    pub fn padded_len(&self, len: usize) -> usize {
        let m = 1 << self.depth();
        len.div_ceil(m) * m
    }

    /// Activated conditioning vector `act(MLP(temb(t)) + E[y])`.
    pub fn condition(&self, p: &[Tensor], t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError> {
        let act = self.config.activation.layer();
        let temb = timestep_embedding(t, self.config.time_dim);
        let h = self.time_fc2.forward(p, &act.apply(&self.time_fc1.forward(p, &temb)?))?;
        let c = h.add(&self.class_embed.forward(p, labels)?);
        Ok(act.apply(&c))
    }

    pub fn forward(&self, p: &[Tensor], x: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.shape.channels || s[0] != t.len() || s[0] != labels.len() {
            return Err(ModelError::Config(format!(
                "U-Net input {s:?} with {} timesteps and {} labels, expected (B, {}, L)",
                t.len(),
                labels.len(),
                self.shape.channels
            )));
        }
        let act = self.config.activation.layer();
        let len = s[2];
        let padded = self.padded_len(len);
        let x = if padded == len { x.clone() } else { x.pad_axis(2, 0, padded) };
        let cond = self.condition(p, t, labels)?;

        let mut h = self.input.forward(p, &x)?;
        let mut skips = Vec::with_capacity(self.depth());
        for (block, down) in self.down_blocks.iter().zip(&self.downs) {
            h = block.forward(p, &h, Some(&cond), act)?;
            skips.push(h.clone());
            h = down.forward(p, &h)?;
        }
        h = self.mid.forward(p, &h, Some(&cond), act)?;
        for (up, block) in self.ups.iter().zip(&self.up_blocks) {
            h = up.forward(p, &h)?;
            let skip = skips.pop().expect("one skip per level");
            h = block.forward(p, &Tensor::concat(&[h, skip], 1), Some(&cond), act)?;
        }
        let out = self.output.forward(p, &act.apply(&self.out_norm.forward(p, &h)?))?;
        Ok(if padded == len { out } else { out.slice(2, 0, len) })
    }

    /// The network evaluated at a given parameter set (live or EMA).
    pub fn with_params<'a>(&'a self, params: &'a [Tensor]) -> UNetAt<'a> {
        UNetAt { net: self, params }
    }
}

pub struct UNetAt<'a> {
    pub net: &'a UNet1D,
    pub params: &'a [Tensor],
}

impl EpsilonModel for UNetAt<'_> {
    fn predict(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError> {
        self.net.forward(self.params, x_t, t, labels)
    }
}

/// Random quantities of one denoising-loss evaluation.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    /// Labels after dropout to the null token.
    pub labels: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    /// `t ~ U{1..T}`, then per-row label dropout, then `eps ~ N(0, I)`.
    pub fn draw(
        shape: &[usize],
        labels: &[usize],
        sched: &BetaSchedule,
        label_dropout: f64,
        null_label: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let t = labels.iter().map(|_| rng.gen_range(1..=sched.steps())).collect();
        let labels = labels
            .iter()
            .map(|&y| if rng.gen::<f64>() < label_dropout { null_label } else { y })
            .collect();
        let eps = normal_tensor(shape, rng);
        Self { t, labels, eps }
    }
}

/// `(1/B) sum_i ||eps_i - model(q_sample(x0_i, t_i, eps_i), t_i, y_i)||^2`.
pub fn denoise_loss_with(
    model: &impl EpsilonModel,
    x0: &Tensor,
    draw: &NoiseDraw,
    sched: &BetaSchedule,
) -> Result<Tensor, ModelError> {
    let x_t = sched.q_sample(x0, &draw.t, &draw.eps)?;
    let pred = model.predict(&x_t, &draw.t, &draw.labels)?;
    if pred.shape() != x0.shape() {
        return Err(ModelError::Config(format!(
            "predictor returned {:?} for input {:?}",
            pred.shape(),
            x0.shape()
        )));
    }
    let b = x0.shape()[0] as f64;
    Ok(draw.eps.sub(&pred).square().sum().scale(1.0 / b))
}

pub fn denoise_loss(
    model: &impl EpsilonModel,
    x0: &Tensor,
    labels: &[usize],
    sched: &BetaSchedule,
    label_dropout: f64,
    null_label: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, ModelError> {
    let draw = NoiseDraw::draw(x0.shape(), labels, sched, label_dropout, null_label, rng);
    denoise_loss_with(model, x0, &draw, sched)
}

/// `eps_null + w (eps_cond - eps_null)`; `w = 1` and `w = 0` return the
/// respective branch unchanged.
pub fn cfg_epsilon(eps_cond: &Tensor, eps_null: &Tensor, w: f64) -> Tensor {
    if w == 1.0 {
        eps_cond.clone()
    } else if w == 0.0 {
        eps_null.clone()
    } else {
        eps_null.add(&eps_cond.sub(eps_null).scale(w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance: f64,
    /// DDIM stochasticity; 0 is the deterministic sampler.
    pub eta: f64,
    /// Clamp each step's predicted `x0` to `[-c, c]`.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 80,
            guidance: 1.5,
            eta: 0.0,
            clip_x0: None,
        }
    }
}

/// Uniformly spaced integer timesteps from `T` down to 1, strictly
/// decreasing.
pub fn sampling_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>, ModelError> {
    if num_steps == 0 || num_steps > total {
        return Err(ModelError::Config(format!("num_steps must lie in 1..={total}, got {num_steps}")));
    }
    if num_steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (num_steps - 1) as f64;
    Ok((0..num_steps)
        .map(|i| (1.0 + span * (num_steps - 1 - i) as f64).round() as usize)
        .collect())
}

/// DDIM from `x_T` (supplied) down to `x_0` under classifier-free guidance.
///
/// At `w = 1` only the conditional branch is evaluated and at `w = 0` only
/// the null branch.
pub fn ddim_from(
    model: &impl EpsilonModel,
    x_t: Tensor,
    labels: &[usize],
    null_label: usize,
    cfg: &SamplerConfig,
    sched: &BetaSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, ModelError> {
    if !(cfg.eta >= 0.0) {
        return Err(ModelError::Config("eta must be >= 0".into()));
    }
    if cfg.clip_x0.is_some_and(|c| !(c > 0.0)) {
        return Err(ModelError::Config("clip_x0 must be positive".into()));
    }
    let steps = sampling_timesteps(sched.steps(), cfg.num_steps)?;
    let b = labels.len();
    let nulls = vec![null_label; b];
    no_grad(|| {
        let mut x = x_t;
        for (i, &t) in steps.iter().enumerate() {
            let tt = vec![t; b];
            let eps = if cfg.guidance == 1.0 {
                model.predict(&x, &tt, labels)?
            } else if cfg.guidance == 0.0 {
                model.predict(&x, &tt, &nulls)?
            } else {
                let c = model.predict(&x, &tt, labels)?;
                let n = model.predict(&x, &tt, &nulls)?;
                cfg_epsilon(&c, &n, cfg.guidance)
            };
            let t_prev = steps.get(i + 1).copied().unwrap_or(0);
            let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
            let mut x0 = x.sub(&eps.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt());
            if let Some(c) = cfg.clip_x0 {
                x0 = Tensor::from_vec(x0.shape(), x0.data().iter().map(|v| v.clamp(-c, c)).collect());
            }
            let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            x = x0.scale(ab_prev.sqrt()).add(&eps.scale(dir));
            if sigma > 0.0 && t_prev > 0 {
                x = x.add(&normal_tensor(x.shape(), rng).scale(sigma));
            }
        }
        Ok(x)
    })
}

/// Draws `x_T ~ N(0, I)` from `rng` and runs [`ddim_from`]. Output is in
/// the training (z-score) space.
pub fn sample(
    model: &impl EpsilonModel,
    shape: DataShape,
    labels: &[usize],
    cfg: &SamplerConfig,
    sched: &BetaSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, ModelError> {
    if let Some(&y) = labels.iter().find(|&&y| y >= shape.num_classes) {
        return Err(ModelError::Config(format!("label {y} >= {}", shape.num_classes)));
    }
    let x_t = normal_tensor(&[labels.len(), shape.channels, shape.len], rng);
    ddim_from(model, x_t, labels, shape.num_classes, cfg, sched, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub label_dropout: f64,
    pub batch: usize,
    /// Optimizer updates.
    pub steps: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1 + n) / (10 + n))`.
    pub ema_warmup: bool,
    /// Also evaluate the EMA weights on each training batch (same noise).
    pub log_ema_loss: bool,
    pub smoothing_window: usize,
    pub patience: Option<usize>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            label_dropout: 0.1,
            batch: 32,
            steps: 5000,
            seed: 0,
            ema_decay: 0.999,
            ema_warmup: true,
            log_ema_loss: false,
            smoothing_window: 50,
            patience: None,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(ModelError::Config(format!(
                "label_dropout must lie in [0, 1], got {}",
                self.label_dropout
            )));
        }
        if self.batch == 0 {
            return Err(ModelError::Config("batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLogRow {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: Option<f64>,
}

pub fn write_diffusion_log(rows: &[DiffusionLogRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,loss,ema_loss")?;
    for r in rows {
        match r.ema_loss {
            Some(e) => writeln!(out, "{},{},{}", r.step, r.loss, e)?,
            None => writeln!(out, "{},{},", r.step, r.loss)?,
        }
    }
    Ok(())
}

/// U-Net, schedule and data shape.
#[derive(Clone, Debug)]
pub struct Ddpm {
    pub net: UNet1D,
    pub schedule: BetaSchedule,
    pub schedule_config: ScheduleConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DdpmMeta {
    kind: String,
    unet: UNetConfig,
    schedule: ScheduleConfig,
    shape: DataShape,
}

impl Ddpm {
    pub fn new(unet: &UNetConfig, schedule: &ScheduleConfig, shape: DataShape, seed: u64) -> Result<Self, ModelError> {
        Ok(Self {
            net: UNet1D::new(unet, shape, &mut stream_rng(seed, INIT_STREAM))?,
            schedule: BetaSchedule::linear(schedule)?,
            schedule_config: *schedule,
        })
    }

    pub fn shape(&self) -> DataShape {
        self.net.shape
    }

    pub fn null_label(&self) -> usize {
        self.net.shape.num_classes
    }

    /// EMA weights when present, live weights otherwise.
    pub fn eval_params(&self) -> Vec<Tensor> {
        self.net
            .params
            .ema_snapshot()
            .unwrap_or_else(|| self.net.params.tensors().iter().map(Tensor::detach).collect())
    }

    pub fn sample(
        &self,
        labels: &[usize],
        cfg: &SamplerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, ModelError> {
        let p = self.eval_params();
        sample(&self.net.with_params(&p), self.shape(), labels, cfg, &self.schedule, rng)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let meta = DdpmMeta {
            kind: "ddpm".into(),
            unet: self.net.config.clone(),
            schedule: self.schedule_config,
            shape: self.net.shape,
        };
        let mut ck = Checkpoint {
            step,
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            sections: Vec::new(),
        };
        ck.push_model("unet", &self.net.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let meta: DdpmMeta = serde_json::from_str(&ck.meta)
            .map_err(|e| ModelError::Config(format!("checkpoint meta: {e}")))?;
        if meta.kind != "ddpm" {
            return Err(ModelError::Config(format!("checkpoint holds a `{}` model", meta.kind)));
        }
        let mut m = Self::new(&meta.unet, &meta.schedule, meta.shape, 0)?;
        ck.load_model("unet", &mut m.net.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionTrainOutcome {
    pub log: Vec<DiffusionLogRow>,
    /// Step and EMA values at the lowest smoothed training loss.
    pub best_step: usize,
    pub best_ema: Vec<Vec<f64>>,
    pub stopped_early: bool,
}

/// AdamW on the denoising loss with an EMA shadow updated after every step.
pub fn train_ddpm(
    model: &mut Ddpm,
    data: &WindowBatcher,
    cfg: &DiffusionTrainConfig,
) -> Result<DiffusionTrainOutcome, ModelError> {
    cfg.validate()?;
    let shape = model.shape();
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
    let params = &mut model.net.params;
    if params.ema().is_none() {
        params.init_ema(cfg.ema_decay)?;
    }
    let mut opt = Adam::new(
        AdamConfig::adamw(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay),
        &model.net.params,
    )?;
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let null = model.null_label();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize)> = None;
    let mut best_ema = Vec::new();
    let mut best_step = 0;
    let mut stopped_early = false;
    let mut last_norm = 0.0;

    for step in 0..cfg.steps {
        let (x0, labels) = data.sample(cfg.batch, &mut rng);
        let draw = NoiseDraw::draw(x0.shape(), &labels, &model.schedule, cfg.label_dropout, null, &mut rng);
        let live = model.net.params.tensors();
        let loss = denoise_loss_with(&model.net.with_params(live), &x0, &draw, &model.schedule)?;
        let loss_v = loss.item();
        let diag = |n: f64| format!("lr={}, grad norm={n:.4e}", cfg.lr);
        if !loss_v.is_finite() {
            return Err(ModelError::NonFinite {
                what: "denoising loss".into(),
                step,
                diagnostic: diag(last_norm),
            });
        }
        let grads = backward(&loss, live)?;
        last_norm = grad_norm(&grads);
        if !last_norm.is_finite() {
            return Err(ModelError::NonFinite {
                what: "gradient".into(),
                step,
                diagnostic: diag(last_norm),
            });
        }
        opt.step(&mut model.net.params, &grads)?;
        let d = if cfg.ema_warmup {
            cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
        } else {
            cfg.ema_decay
        };
        model.net.params.ema_update_with(d);

        let ema_loss = if cfg.log_ema_loss {
            let ema = model.net.params.ema_snapshot().expect("initialised above");
            let l = no_grad(|| denoise_loss_with(&model.net.with_params(&ema), &x0, &draw, &model.schedule))?;
            Some(l.item())
        } else {
            None
        };
        log.push(DiffusionLogRow {
            step,
            loss: loss_v,
            ema_loss,
        });
        losses.push(loss_v);
        if let Some(m) = trailing_mean(&losses, cfg.smoothing_window) {
            if best.map_or(true, |(b, _)| m < b) {
                best = Some((m, step));
                best_ema = ema_values(&model.net.params);
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
        best_ema = ema_values(&model.net.params);
        best_step = log.len().saturating_sub(1);
    }
    Ok(DiffusionTrainOutcome {
        log,
        best_step,
        best_ema,
        stopped_early,
    })
}

fn ema_values(params: &ModelParams) -> Vec<Vec<f64>> {
    params
        .ema_snapshot()
        .map(|e| e.iter().map(|t| t.data().to_vec()).collect())
        .unwrap_or_else(|| params.values())
}
