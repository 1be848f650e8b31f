use artifactgen_autodiff::nn::Activation;
use artifactgen_autodiff::{backward, Tensor};
use artifactgen_core::dataset::{NormMeta, Window, WindowSource};
use artifactgen_core::metrics::{mmd_unbiased, WindowSet};
use artifactgen_core::dataset::NormScheme;
use artifactgen_core::signal::stft_magnitude;
use artifactgen_models::wgan::*;
use artifactgen_models::{tensor_to_windows, DataShape, ModelError, WindowBatcher};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TINY: WganArch = WganArch {
    latent_dim: 8,
    widths: [8, 8, 4, 4],
    leaky_slope: 0.2,
};

fn shape(c: usize, l: usize, k: usize) -> DataShape {
    DataShape {
        channels: c,
        len: l,
        num_classes: k,
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn sine_windows(n: usize, c: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Window> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let (f, amp) = if label == 0 { (5.0, 0.9) } else { (40.0, 0.3) };
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let data = (0..c * l)
                .map(|j| amp * (std::f64::consts::TAU * f * (j % l) as f64 / 250.0 + ph).sin())
                .collect();
            Window {
                data,
                channels: c,
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
fn generator_is_deterministic_and_bounded() {
    let g = Wgan::new(&TINY, shape(3, 250, 5), 4).unwrap().generator;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let labels: Vec<usize> = (0..2000).map(|i| i % 5).collect();
    for _ in 0..5 {
        let z = randn(&[2000, 8], &mut rng);
        let a = g.generate(&z, &labels).unwrap();
        let b = g.generate(&z, &labels).unwrap();
        assert_eq!(a.shape(), &[2000, 3, 250]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn generator_crops_to_any_length() {
    for len in [37, 100, 101, 250] {
        let g = Wgan::new(&TINY, shape(2, len, 2), 0).unwrap().generator;
        let out = g.sample(&[0, 1], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.shape(), &[2, 2, len]);
    }
}

#[test]
fn label_changes_output_for_fixed_latent() {
    let g = Wgan::new(&TINY, shape(2, 100, 2), 0).unwrap().generator;
    let z = randn(&[1, 8], &mut ChaCha8Rng::seed_from_u64(2));
    let a = g.generate(&z, &[0]).unwrap();
    let b = g.generate(&z, &[1]).unwrap();
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(d > 0.0);
}

#[test]
fn out_of_range_label_is_rejected() {
    let g = Wgan::new(&TINY, shape(2, 50, 2), 0).unwrap().generator;
    assert!(g.sample(&[2], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn projection_identity_on_random_inputs() {
    let critic = Wgan::new(&TINY, shape(2, 40, 4), 7).unwrap().critic;
    let p = critic.params.tensors();
    let table = p[critic.embed.table.0].data().to_vec();
    let w = p[critic.head.w.0].data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = randn(&[1000, 2, 40], &mut rng);
        let labels: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..4)).collect();
        let parts = critic.score_parts(p, &x, &labels).unwrap();
        let score = parts.score();
        let phi = parts.phi.data();
        for (i, &y) in labels.iter().enumerate() {
            let f = &phi[i * 8..(i + 1) * 8];
            let lin: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
            let proj: f64 = f.iter().zip(&table[y * 8..(y + 1) * 8]).map(|(a, b)| a * b).sum();
            worst = worst.max((score.data()[i] - lin - proj).abs());
            worst = worst.max((parts.projection.data()[i] - proj).abs());
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn zero_embeddings_make_score_label_free() {
    let mut critic = Wgan::new(&TINY, shape(2, 40, 3), 1).unwrap().critic;
    let id = critic.embed.table;
    critic.params.set(id, vec![0.0; 3 * 8]);
    let x = randn(&[4, 2, 40], &mut ChaCha8Rng::seed_from_u64(0));
    let p = critic.params.tensors();
    let a = critic.score(p, &x, &[0, 0, 0, 0]).unwrap();
    let b = critic.score(p, &x, &[1, 2, 1, 2]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn score_difference_is_embedding_difference() {
    let critic = Wgan::new(&TINY, shape(2, 40, 3), 2).unwrap().critic;
    let p = critic.params.tensors();
    let x = randn(&[5, 2, 40], &mut ChaCha8Rng::seed_from_u64(5));
    let parts = critic.score_parts(p, &x, &[0; 5]).unwrap();
    let s2 = critic.score(p, &x, &[2; 5]).unwrap();
    let table = p[critic.embed.table.0].data();
    for i in 0..5 {
        let f = &parts.phi.data()[i * 8..(i + 1) * 8];
        let expect: f64 = (0..8).map(|j| f[j] * (table[j] - table[16 + j])).sum();
        assert!((parts.score().data()[i] - s2.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn head_scaling_scales_only_the_linear_term() {
    let mut critic = Wgan::new(&TINY, shape(2, 40, 3), 3).unwrap().critic;
    let x = randn(&[6, 2, 40], &mut ChaCha8Rng::seed_from_u64(6));
    let labels = [0, 1, 2, 0, 1, 2];
    let before = critic.score_parts(critic.params.tensors(), &x, &labels).unwrap();
    let w = critic.head.w;
    let doubled: Vec<f64> = critic.params.get(w).data().iter().map(|v| 2.0 * v).collect();
    critic.params.set(w, doubled);
    let after = critic.score_parts(critic.params.tensors(), &x, &labels).unwrap();
    for i in 0..6 {
        assert!((after.linear.data()[i] - 2.0 * before.linear.data()[i]).abs() < 1e-12);
        assert_eq!(after.projection.data()[i], before.projection.data()[i]);
    }
}

#[test]
fn scaling_the_output_layer_preserves_ranking() {
    let mut critic = Wgan::new(&TINY, shape(2, 40, 3), 8).unwrap().critic;
    let x = randn(&[10, 2, 40], &mut ChaCha8Rng::seed_from_u64(9));
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let before = critic.score(critic.params.tensors(), &x, &labels).unwrap();
    let c = 3.7;
    for id in [critic.head.w, critic.embed.table] {
        let v: Vec<f64> = critic.params.get(id).data().iter().map(|v| c * v).collect();
        critic.params.set(id, v);
    }
    let after = critic.score(critic.params.tensors(), &x, &labels).unwrap();
    let rank = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        idx
    };
    assert_eq!(rank(before.data()), rank(after.data()));
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((b - c * a).abs() < 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn critic_rejects_activation_without_second_derivative() {
    let err = Critic::new(&TINY, shape(1, 20, 2), Activation::FusedSilu, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap_err();
    assert!(matches!(err, ModelError::Autodiff(_)), "{err}");
    assert!(err.to_string().contains("second-order"));
}

fn linear_critic(v: Vec<f64>, shape: [usize; 3]) -> impl Fn(&Tensor) -> Result<Tensor, ModelError> {
    let n = shape[1] * shape[2];
    let v = Tensor::from_vec(&[n, 1], v);
    move |x: &Tensor| {
        let b = x.shape()[0];
        Ok(x.reshape(&[b, n]).matmul(&v).reshape(&[b]))
    }
}

#[test]
fn penalty_of_linear_critic_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = [6, 2, 15];
    let raw: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let real = randn(&s, &mut rng);
    let fake = randn(&s, &mut rng);
    let alpha: Vec<f64> = (0..6).map(|_| rng.gen()).collect();

    let (gp, norms) = gradient_penalty(linear_critic(unit.clone(), s), &real, &fake, &alpha, 10.0).unwrap();
    assert!(gp.item().abs() < 1e-20, "{}", gp.item());
    assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-12));

    let twice: Vec<f64> = unit.iter().map(|v| 2.0 * v).collect();
    let (gp, _) = gradient_penalty(linear_critic(twice, s), &real, &fake, &alpha, 10.0).unwrap();
    assert!((gp.item() - 10.0).abs() < 1e-9, "{}", gp.item());
}

#[test]
fn penalty_is_nonnegative_and_differentiable() {
    let critic = Wgan::new(&TINY, shape(2, 30, 2), 11).unwrap().critic;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = critic.params.tensors();
    for _ in 0..5 {
        let real = randn(&[3, 2, 30], &mut rng);
        let fake = randn(&[3, 2, 30], &mut rng);
        let alpha: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let (gp, _) =
            gradient_penalty(|x| critic.score(p, x, &[0, 1, 0]), &real, &fake, &alpha, 10.0).unwrap();
        assert!(gp.item() >= 0.0);
        let grads = backward(&gp, p).unwrap();
        assert!(grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
    }
}

#[test]
fn critic_loss_on_identical_batches_is_the_penalty() {
    let critic = Wgan::new(&TINY, shape(2, 30, 2), 13).unwrap().critic;
    let p = critic.params.tensors();
    let x = randn(&[4, 2, 30], &mut ChaCha8Rng::seed_from_u64(14));
    let labels = [0, 1, 1, 0];
    let d = critic.score(p, &x, &labels).unwrap().mean();
    let (gp, _) = gradient_penalty(|t| critic.score(p, t, &labels), &x, &x, &[0.3; 4], 10.0).unwrap();
    let loss = d.sub(&d).add(&gp);
    assert_eq!(loss.item(), gp.item());
}

fn sine(f: f64, n: usize, ph: f64) -> Vec<f64> {
    (0..n).map(|i| (std::f64::consts::TAU * f * i as f64 / 250.0 + ph).sin()).collect()
}

#[test]
fn spectral_magnitude_matches_fft_reference() {
    let s = SpectralL1::new(64, 16).unwrap();
    let x = sine(17.0, 250, 0.3);
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 0.01 * i as f64).collect();
    let t = Tensor::from_vec(&[1, 2, 250], [x.clone(), y.clone()].concat());
    let mag = s.magnitude(&t).unwrap();
    assert_eq!(mag.shape(), &[2, 33, 12]);
    for (c, sig) in [x, y].iter().enumerate() {
        let reference = stft_magnitude(sig, 64, 16).unwrap();
        for f in 0..reference.frames {
            for k in 0..33 {
                let ours = mag.data()[(c * 33 + k) * 12 + f];
                assert!((ours - reference.frame(f)[k]).abs() < 1e-5, "{ours} vs {}", reference.frame(f)[k]);
            }
        }
    }
}

#[test]
fn spectral_loss_orders_frequency_gaps() {
    let s = SpectralL1::new(64, 16).unwrap();
    let t = |f: f64| Tensor::from_vec(&[1, 1, 250], sine(f, 250, 0.0));
    let same = s.loss(&t(10.0), &t(10.0)).unwrap().item();
    let near = s.loss(&t(10.0), &t(11.0)).unwrap().item();
    let far = s.loss(&t(10.0), &t(20.0)).unwrap().item();
    assert!(same.abs() < 1e-12);
    assert!(far > near, "far {far}, near {near}");
    let back = s.loss(&t(20.0), &t(10.0)).unwrap().item();
    assert!((far - back).abs() < 1e-15);
}

#[test]
fn zero_penalty_single_step_moves_only_parameters_with_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = WindowBatcher::new(&sine_windows(20, 1, 50, &mut rng), 2).unwrap();
    let mut model = Wgan::new(&TINY, shape(1, 50, 2), 16).unwrap();
    // Zero output layer: every critic parameter below it gets zero gradient.
    let (w, e) = (model.critic.head.w, model.critic.embed.table);
    model.critic.params.set(w, vec![0.0; 8]);
    model.critic.params.set(e, vec![0.0; 16]);
    let before = model.critic.params.values();
    let cfg = GanTrainConfig {
        lambda_gp: 0.0,
        n_critic: 1,
        batch: 4,
        steps: 1,
        ..Default::default()
    };
    train_wgan(&mut model, &data, &cfg).unwrap();
    let after = model.critic.params.values();
    for (i, name) in model.critic.params.names().iter().enumerate() {
        let moved = before[i] != after[i];
        let has_grad = name.starts_with("d.head") || name.starts_with("d.embed");
        assert_eq!(moved, has_grad, "{name}");
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = WindowBatcher::new(&sine_windows(20, 2, 50, &mut rng), 2).unwrap();
    let cfg = GanTrainConfig {
        batch: 4,
        steps: 3,
        n_critic: 2,
        spectral_weight: 0.5,
        stft_nfft: 16,
        stft_hop: 8,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = Wgan::new(&TINY, shape(2, 50, 2), 3).unwrap();
        let out = train_wgan(&mut m, &data, &cfg).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    let bits = |rows: &[GanLogRow]| -> Vec<u64> {
        rows.iter()
            .flat_map(|r| [r.d_loss, r.g_loss, r.gp, r.spectral].map(f64::to_bits))
            .collect()
    };
    assert_eq!(bits(&o1.log), bits(&o2.log));
    assert_eq!(m1.to_checkpoint(3).to_bytes(), m2.to_checkpoint(3).to_bytes());

    let restored = Wgan::from_checkpoint(&artifactgen_autodiff::checkpoint::Checkpoint::from_bytes(
        &m1.to_checkpoint(3).to_bytes(),
    )
    .unwrap())
    .unwrap();
    assert_eq!(restored.generator.params.values(), m1.generator.params.values());
    assert_eq!(restored.critic.params.values(), m1.critic.params.values());

    let mut csv = Vec::new();
    write_gan_log(&o1.log, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,d_loss,g_loss,gp,spectral\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let data = WindowBatcher::new(&sine_windows(10, 1, 50, &mut rng), 2).unwrap();
    let mut m = Wgan::new(&TINY, shape(1, 50, 2), 0).unwrap();
    let cfg = GanTrainConfig {
        lr: 1e300,
        batch: 2,
        steps: 50,
        n_critic: 1,
        ..Default::default()
    };
    match train_wgan(&mut m, &data, &cfg) {
        Err(ModelError::NonFinite { step, diagnostic, .. }) => {
            assert!(step < 50);
            assert!(diagnostic.contains("lr=") && diagnostic.contains("grad norm"), "{diagnostic}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn toy_training_beats_untrained_generator() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let real = sine_windows(100, 1, 100, &mut rng);
    let data = WindowBatcher::new(&real, 2).unwrap();
    let arch = WganArch {
        latent_dim: 16,
        widths: [16, 16, 8, 8],
        leaky_slope: 0.2,
    };
    let mut m = Wgan::new(&arch, shape(1, 100, 2), 1).unwrap();
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let untrained = tensor_to_windows(&m.generator.sample(&labels, &mut rng).unwrap(), &labels, "u");
    let cfg = GanTrainConfig {
        batch: 16,
        steps: 300,
        lr: 1e-3,
        ..Default::default()
    };
    let out = train_wgan(&mut m, &data, &cfg).unwrap();
    assert!(out.log.iter().all(|r| r.gp.is_finite() && r.gp < 10.0 * cfg.lambda_gp));
    let trained = tensor_to_windows(&m.generator.sample(&labels, &mut rng).unwrap(), &labels, "f");
    let set = |o: &str, w: Vec<Window>| WindowSet::new(o, NormScheme::None, w).unwrap();
    let before = mmd_unbiased(&set("real", real.clone()), &set("u", untrained)).unwrap().value;
    let after = mmd_unbiased(&set("real", real), &set("f", trained)).unwrap().value;
    assert!(after < before, "trained {after} vs untrained {before}");
}
