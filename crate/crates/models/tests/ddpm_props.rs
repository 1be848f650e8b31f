use std::cell::RefCell;

use artifactgen_autodiff::checkpoint::Checkpoint;
use artifactgen_autodiff::nn::Activation;
use artifactgen_autodiff::{backward, Tensor};
use artifactgen_core::dataset::{NormMeta, NormScheme, Window, WindowSource};
use artifactgen_core::metrics::{mmd_unbiased, WindowSet};
use artifactgen_models::ddpm::*;
use artifactgen_models::{tensor_to_windows, DataShape, ModelError, WindowBatcher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn shape(c: usize, l: usize, k: usize) -> DataShape {
    DataShape {
        channels: c,
        len: l,
        num_classes: k,
    }
}

fn tiny(activation: UNetActivation) -> UNetConfig {
    UNetConfig {
        widths: vec![4, 8],
        time_dim: 8,
        cond_dim: 8,
        groups: 2,
        activation,
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn sched() -> BetaSchedule {
    BetaSchedule::linear(&ScheduleConfig::default()).unwrap()
}

fn sine_windows(n: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Window> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let f = if label == 0 { 5.0 } else { 40.0 };
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Window {
                data: (0..l)
                    .map(|j| 1.4 * (std::f64::consts::TAU * f * j as f64 / 250.0 + ph).sin())
                    .collect(),
                channels: 1,
                len: l,
                label,
                subject_id: "s".into(),
                source: WindowSource {
                    recording: "r".into(),
                    start: i,
                },
                norm: NormMeta::none(),
            }
        })
        .collect()
}

#[test]
fn schedule_is_monotone_and_bounded() {
    let s = sched();
    assert_eq!(s.alpha_bar(0), 1.0);
    let mut prev = 1.0;
    for t in 1..=s.steps() {
        let ab = s.alpha_bar(t);
        assert!(ab > 0.0 && ab < prev, "t={t}");
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        prev = ab;
    }
    assert!((s.beta(1) - 1e-4).abs() < 1e-15);
    assert!((s.beta(1000) - 0.02).abs() < 1e-15);
}

#[test]
fn q_sample_rejects_out_of_range_steps() {
    let s = sched();
    let x = Tensor::zeros(&[2, 1, 4]);
    let e = Tensor::zeros(&[2, 1, 4]);
    assert!(s.q_sample(&x, &[0, 1], &e).is_err());
    assert!(s.q_sample(&x, &[1, 1001], &e).is_err());
    assert!(s.q_sample(&x, &[1, 1000], &e).is_ok());
}

#[test]
fn q_sample_is_linear_in_its_inputs() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = [1, 17, 500, 1000];
    let (x1, x2) = (randn(&[4, 2, 8], &mut rng), randn(&[4, 2, 8], &mut rng));
    let (e1, e2) = (randn(&[4, 2, 8], &mut rng), randn(&[4, 2, 8], &mut rng));
    let (a, b) = (0.7, -1.3);
    let lhs = s
        .q_sample(&x1.scale(a).add(&x2.scale(b)), &t, &e1.scale(a).add(&e2.scale(b)))
        .unwrap();
    let rhs = s.q_sample(&x1, &t, &e1).unwrap().scale(a).add(&s.q_sample(&x2, &t, &e2).unwrap().scale(b));
    for (u, v) in lhs.data().iter().zip(rhs.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn q_sample_moments_match_closed_form() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let x0 = 0.8;
    for t in [1, 10, 250, 600, 1000] {
        let eps = randn(&[n, 1, 1], &mut rng);
        let xt = s.q_sample(&Tensor::full(&[n, 1, 1], x0), &vec![t; n], &eps).unwrap();
        let mean = xt.data().iter().sum::<f64>() / n as f64;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let sd = (1.0 - ab).sqrt();
        // Five standard errors of each estimator.
        assert!((mean - ab.sqrt() * x0).abs() < 5.0 * sd / (n as f64).sqrt(), "t={t} mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 5.0 * (1.0 - ab) * (2.0 / n as f64).sqrt(), "t={t} var {var}");
    }
}

struct Oracle<'a> {
    x0: &'a Tensor,
    sched: &'a BetaSchedule,
}

impl EpsilonModel for Oracle<'_> {
    fn predict(&self, x_t: &Tensor, t: &[usize], _: &[usize]) -> Result<Tensor, ModelError> {
        let per = x_t.numel() / t.len();
        let data = x_t
            .data()
            .iter()
            .zip(self.x0.data())
            .enumerate()
            .map(|(i, (x, x0))| {
                let ab = self.sched.alpha_bar(t[i / per]);
                (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()
            })
            .collect();
        Ok(Tensor::from_vec(x_t.shape(), data))
    }
}

struct Zero;

impl EpsilonModel for Zero {
    fn predict(&self, x_t: &Tensor, _: &[usize], _: &[usize]) -> Result<Tensor, ModelError> {
        Ok(Tensor::zeros(x_t.shape()))
    }
}

#[test]
fn loss_of_zero_and_oracle_predictors() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, c, l) = (400, 2, 25);
    let x0 = randn(&[b, c, l], &mut rng);
    let labels = vec![0; b];
    let zero = denoise_loss(&Zero, &x0, &labels, &s, 0.1, 3, &mut rng).unwrap().item();
    // E||eps||^2 = C L, with standard error sqrt(2 C L / B).
    let cl = (c * l) as f64;
    assert!((zero - cl).abs() < 5.0 * (2.0 * cl / b as f64).sqrt(), "{zero}");
    let oracle = Oracle { x0: &x0, sched: &s };
    let loss = denoise_loss(&oracle, &x0, &labels, &s, 0.1, 3, &mut rng).unwrap().item();
    assert!(loss < 1e-18, "{loss}");
}

#[test]
fn ddim_with_oracle_recovers_the_data() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = randn(&[3, 2, 10], &mut rng);
    let oracle = Oracle { x0: &x0, sched: &s };
    let cfg = SamplerConfig {
        num_steps: 1000,
        guidance: 1.0,
        ..Default::default()
    };
    let out = sample(&oracle, shape(2, 10, 2), &[0, 1, 0], &cfg, &s, &mut rng).unwrap();
    let worst = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn timesteps_are_strictly_decreasing() {
    for (total, n) in [(1000, 80), (1000, 50), (1000, 1000), (10, 3), (1000, 1)] {
        let ts = sampling_timesteps(total, n).unwrap();
        assert_eq!(ts.len(), n);
        assert_eq!(ts[0], total);
        if n > 1 {
            assert_eq!(*ts.last().unwrap(), 1);
        }
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }
    assert!(sampling_timesteps(10, 11).is_err());
    assert!(sampling_timesteps(10, 0).is_err());
}

#[test]
fn guidance_combination_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = randn(&[2, 3, 5], &mut rng);
    let n = randn(&[2, 3, 5], &mut rng);
    assert_eq!(cfg_epsilon(&c, &n, 1.0).data(), c.data());
    assert_eq!(cfg_epsilon(&c, &n, 0.0).data(), n.data());
    let same = cfg_epsilon(&c, &c, 3.5);
    for (a, b) in same.data().iter().zip(c.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let mixed = cfg_epsilon(&c, &n, 2.5);
    for ((m, a), b) in mixed.data().iter().zip(c.data()).zip(n.data()) {
        assert!((m - (b + 2.5 * (a - b))).abs() < 1e-12);
    }
}

/// Wraps a model and counts how often the null label is requested.
struct Counting<'a, M> {
    inner: &'a M,
    null: usize,
    null_calls: RefCell<usize>,
}

impl<M: EpsilonModel> EpsilonModel for Counting<'_, M> {
    fn predict(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError> {
        if labels.contains(&self.null) {
            *self.null_calls.borrow_mut() += 1;
        }
        self.inner.predict(x_t, t, labels)
    }
}

/// Conditional branch of `inner`, garbage for the null label.
struct NullPoisoned<'a, M>(&'a M, usize);

impl<M: EpsilonModel> EpsilonModel for NullPoisoned<'_, M> {
    fn predict(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor, ModelError> {
        if labels.contains(&self.1) {
            Ok(Tensor::full(x_t.shape(), 1e3))
        } else {
            self.0.predict(x_t, t, labels)
        }
    }
}

#[test]
fn unit_guidance_never_evaluates_the_null_branch() {
    let net = UNet1D::new(&tiny(UNetActivation::FusedSilu), shape(1, 16, 2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m = net.with_params(net.params.tensors());
    let s = sched();
    let cfg = SamplerConfig {
        num_steps: 10,
        guidance: 1.0,
        ..Default::default()
    };
    let counting = Counting {
        inner: &m,
        null: 2,
        null_calls: RefCell::new(0),
    };
    let a = sample(&counting, shape(1, 16, 2), &[0, 1], &cfg, &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(*counting.null_calls.borrow(), 0);
    let b = sample(&NullPoisoned(&m, 2), shape(1, 16, 2), &[0, 1], &cfg, &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a.data(), b.data());

    let guided = SamplerConfig { guidance: 1.5, ..cfg };
    let counting = Counting {
        inner: &m,
        null: 2,
        null_calls: RefCell::new(0),
    };
    sample(&counting, shape(1, 16, 2), &[0, 1], &guided, &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(*counting.null_calls.borrow(), 10);
}

#[test]
fn sampling_is_seed_deterministic() {
    let model = Ddpm::new(&tiny(UNetActivation::FusedSilu), &ScheduleConfig::default(), shape(2, 20, 3), 1).unwrap();
    for eta in [0.0, 1.0] {
        let cfg = SamplerConfig {
            num_steps: 8,
            eta,
            ..Default::default()
        };
        let run = |seed| model.sample(&[0, 1, 2], &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b, c) = (run(7), run(7), run(8));
        assert_eq!(a.shape(), &[3, 2, 20]);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
    let bad = SamplerConfig { eta: -0.5, ..Default::default() };
    assert!(model.sample(&[0], &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    assert!(model.sample(&[3], &SamplerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn unet_preserves_shape_for_any_length() {
    for len in [16, 37, 250] {
        let net = UNet1D::new(&tiny(UNetActivation::FusedSilu), shape(3, len, 2), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(net.padded_len(len) % 4, 0);
        assert!(net.padded_len(len) >= len && net.padded_len(len) < len + 4);
        let x = randn(&[2, 3, len], &mut ChaCha8Rng::seed_from_u64(10));
        let y = net.forward(net.params.tensors(), &x, &[1, 999], &[0, 2]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }
}

#[test]
fn zero_film_weights_give_the_unmodulated_block() {
    let mut net = UNet1D::new(&tiny(UNetActivation::Silu), shape(1, 16, 2), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let block = &net.down_blocks[1];
    let (w, b) = (block.film.w, block.film.b.unwrap());
    let (nw, nb) = (net.params.get(w).numel(), net.params.get(b).numel());
    net.params.set(w, vec![0.0; nw]);
    net.params.set(b, vec![0.0; nb]);
    let block = &net.down_blocks[1];
    let x = randn(&[3, 4, 8], &mut rng);
    let cond = randn(&[3, 8], &mut rng);
    let p = net.params.tensors();
    let with = block.forward(p, &x, Some(&cond), Activation::Silu).unwrap();
    let without = block.forward(p, &x, None, Activation::Silu).unwrap();
    let worst = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn denoise_loss_gradient_matches_finite_differences() {
    for act in [UNetActivation::Silu, UNetActivation::FusedSilu] {
        let mut net = UNet1D::new(&tiny(act), shape(1, 8, 2), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = randn(&[2, 1, 8], &mut rng);
        let draw = NoiseDraw::draw(&[2, 1, 8], &[0, 1], &s, 0.5, 2, &mut rng);
        let loss = |net: &UNet1D| denoise_loss_with(&net.with_params(net.params.tensors()), &x0, &draw, &s).unwrap();
        let grads = backward(&loss(&net), net.params.tensors()).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..net.params.len() {
            let id = artifactgen_autodiff::ParamId(i);
            let base = net.params.get(id).data().to_vec();
            for j in 0..base.len() {
                let mut v = base.clone();
                v[j] = base[j] + h;
                net.params.set(id, v.clone());
                let up = loss(&net).item();
                v[j] = base[j] - h;
                net.params.set(id, v);
                let down = loss(&net).item();
                net.params.set(id, base.clone());
                let fd = (up - down) / (2.0 * h);
                let an = grads[i].data()[j];
                let tol = 1e-3 * fd.abs().max(an.abs()) + 1e-6;
                assert!((fd - an).abs() <= tol, "{act:?} {}[{j}]: fd {fd} vs {an}", net.params.names()[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, net.params.num_scalars());
    }
}

fn toy_model(seed: u64) -> Ddpm {
    let cfg = UNetConfig {
        widths: vec![8, 16],
        time_dim: 16,
        cond_dim: 16,
        groups: 4,
        activation: UNetActivation::FusedSilu,
    };
    Ddpm::new(&cfg, &ScheduleConfig::default(), shape(1, 64, 2), seed).unwrap()
}

#[test]
fn toy_training_lowers_loss_and_ema_is_smoother() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = WindowBatcher::new(&sine_windows(64, 64, &mut rng), 2).unwrap();
    let mut model = toy_model(0);
    let cfg = DiffusionTrainConfig {
        lr: 2e-3,
        batch: 16,
        steps: 500,
        ema_decay: 0.99,
        log_ema_loss: true,
        ..Default::default()
    };
    let out = train_ddpm(&mut model, &data, &cfg).unwrap();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    let first = mean(&losses[..20]);
    let last = mean(&losses[losses.len() - 100..]);
    assert!(last <= 0.5 * first, "first {first}, last {last}");

    // Step-to-step changes of the loss, holding the draw fixed between the
    // two curves, isolate the parameter noise the average removes.
    let tail = &out.log[out.log.len() - 100..];
    let jitter = |f: &dyn Fn(&DiffusionLogRow) -> f64| {
        tail.windows(2).map(|w| (f(&w[1]) - f(&w[0])).powi(2)).sum::<f64>()
    };
    let live = jitter(&|r| r.loss);
    let ema = jitter(&|r| r.ema_loss.unwrap());
    assert!(ema < live, "ema {ema} vs live {live}");
}

#[test]
fn full_label_dropout_ignores_the_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let real = sine_windows(64, 64, &mut rng);
    let data = WindowBatcher::new(&real, 2).unwrap();
    let mut model = toy_model(1);
    let cfg = DiffusionTrainConfig {
        lr: 2e-3,
        batch: 16,
        steps: 200,
        ema_decay: 0.99,
        label_dropout: 1.0,
        ..Default::default()
    };
    train_ddpm(&mut model, &data, &cfg).unwrap();
    let sampler = SamplerConfig {
        num_steps: 20,
        guidance: 1.0,
        clip_x0: Some(1.5),
        ..Default::default()
    };
    let gen = |y: usize, rng: &mut ChaCha8Rng| {
        let labels = vec![y; 40];
        let t = model.sample(&labels, &sampler, rng).unwrap();
        WindowSet::new("fake", NormScheme::None, tensor_to_windows(&t, &labels, "fake")).unwrap()
    };
    let (g0, g1) = (gen(0, &mut rng), gen(1, &mut rng));
    let by_class = |y: usize| {
        let w: Vec<Window> = real.iter().filter(|w| w.label == y).cloned().collect();
        WindowSet::new("real", NormScheme::None, w).unwrap()
    };
    let fake_gap = mmd_unbiased(&g0, &g1).unwrap().value;
    let real_gap = mmd_unbiased(&by_class(0), &by_class(1)).unwrap().value;
    assert!(fake_gap < real_gap, "generated classes {fake_gap}, real classes {real_gap}");
}

#[test]
fn training_is_deterministic_and_checkpoint_keeps_ema() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = WindowBatcher::new(&sine_windows(16, 64, &mut rng), 2).unwrap();
    let cfg = DiffusionTrainConfig {
        batch: 4,
        steps: 5,
        seed: 3,
        ..Default::default()
    };
    let run = || {
        let mut m = toy_model(2);
        let out = train_ddpm(&mut m, &data, &cfg).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (_, o2) = run();
    let bits = |o: &DiffusionTrainOutcome| o.log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&o1), bits(&o2));

    let bytes = m1.to_checkpoint(5).to_bytes();
    let back = Ddpm::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.net.params.values(), m1.net.params.values());
    let ema = |m: &Ddpm| m.eval_params().iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(ema(&back), ema(&m1));
    assert_ne!(ema(&m1), m1.net.params.values());
    let s = SamplerConfig { num_steps: 5, ..Default::default() };
    let a = m1.sample(&[0, 1], &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = back.sample(&[0, 1], &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.data(), b.data());

    let mut csv = Vec::new();
    write_diffusion_log(&o1.log, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("step,loss,ema_loss\n"));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = DiffusionTrainConfig { label_dropout: 1.5, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(BetaSchedule::linear(&ScheduleConfig { steps: 0, ..Default::default() }).is_err());
    assert!(BetaSchedule::linear(&ScheduleConfig { beta_end: 1.5, ..Default::default() }).is_err());
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let data = WindowBatcher::new(&sine_windows(8, 64, &mut rng), 2).unwrap();
    let mut m = toy_model(3);
    let cfg = DiffusionTrainConfig {
        lr: 1e300,
        batch: 2,
        steps: 50,
        weight_decay: 0.0,
        ..Default::default()
    };
    match train_ddpm(&mut m, &data, &cfg) {
        Err(ModelError::NonFinite { diagnostic, .. }) => assert!(diagnostic.contains("lr="), "{diagnostic}"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}
