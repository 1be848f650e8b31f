use artifactgen_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent generator for one purpose (init, batching, noise) under a
/// shared root seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data)
}

pub(crate) fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), k], data)
}

/// Mean of the last `window` entries, once that many exist.
pub(crate) fn trailing_mean(xs: &[f64], window: usize) -> Option<f64> {
    (window > 0 && xs.len() >= window)
        .then(|| xs[xs.len() - window..].iter().sum::<f64>() / window as f64)
}
