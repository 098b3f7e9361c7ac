//! Seeded synthetic networks and inputs for tests, probes and demos.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::network::{Activation, BatchNorm, Conv2d, Dense, Layer, Network, Padding};
use crate::tensor::Tensor;

pub type SynthRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SynthRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weight/bias initialisation for synthetic layers.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    /// Weight std is `gain / sqrt(fan_in)`.
    pub gain: f64,
    pub bias_std: f64,
    /// When set, every weight and bias is made non-negative.
    pub non_negative: bool,
    pub activation: Activation,
}

impl Default for Init {
    fn default() -> Self {
        Init {
            gain: std::f64::consts::SQRT_2,
            bias_std: 0.05,
            non_negative: false,
            activation: Activation::Relu,
        }
    }
}

pub fn gaussian(rng: &mut SynthRng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("finite gaussian samples")
}

fn param(rng: &mut SynthRng, shape: Vec<usize>, std: f64, init: &Init) -> Tensor {
    let t = gaussian(rng, shape, std);
    if init.non_negative {
        t.map(f64::abs)
    } else {
        t
    }
}

/// MLP with layer widths `dims` (input first). Hidden layers are followed by
/// `init.activation`; the last layer emits raw logits.
pub fn mlp(rng: &mut SynthRng, dims: &[usize], init: Init) -> Result<Network> {
    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (fan_in, out) = (pair[0], pair[1]);
        let w = param(rng, vec![out, fan_in], init.gain / (fan_in as f64).sqrt(), &init);
        let b = (init.bias_std > 0.0).then(|| param(rng, vec![out], init.bias_std, &init));
        layers.push(Layer::Dense(Dense::new(w, b)?));
        if i + 2 < dims.len() {
            layers.push(Layer::Activation(init.activation));
        }
    }
    Network::new(vec![dims[0]], layers)
}

/// Small CNN: `channels[0]`-channel `size×size` input, one 3×3 same-padded
/// conv per entry of `channels[1..]` with ReLU, then a dense head.
pub fn cnn(rng: &mut SynthRng, size: usize, channels: &[usize], classes: usize, init: Init) -> Result<Network> {
    let mut layers = Vec::new();
    for pair in channels.windows(2) {
        let fan_in = pair[0] * 9;
        let w = param(rng, vec![pair[1], pair[0], 3, 3], init.gain / (fan_in as f64).sqrt(), &init);
        let b = (init.bias_std > 0.0).then(|| param(rng, vec![pair[1]], init.bias_std, &init));
        layers.push(Layer::Conv2d(Conv2d::new(w, b, 1, Padding::Same)?));
        layers.push(Layer::Activation(init.activation));
    }
    let flat = channels.last().unwrap() * size * size;
    let w = param(rng, vec![classes, flat], init.gain / (flat as f64).sqrt(), &init);
    let b = (init.bias_std > 0.0).then(|| param(rng, vec![classes], init.bias_std, &init));
    layers.push(Layer::Dense(Dense::new(w, b)?));
    Network::new(vec![channels[0], size, size], layers)
}

/// Random batch-norm over `channels` with positive variances.
pub fn batch_norm(rng: &mut SynthRng, channels: usize) -> Result<BatchNorm> {
    let gamma = gaussian(rng, vec![channels], 0.5).map(|v| 1.0 + v);
    let beta = gaussian(rng, vec![channels], 0.3);
    let mean = gaussian(rng, vec![channels], 0.3);
    let var = gaussian(rng, vec![channels], 0.5).map(|v| 0.2 + v.abs());
    BatchNorm::new(gamma, beta, mean, var, 1e-5)
}

/// `n` inputs drawn uniformly from the unit sphere.
pub fn unit_inputs(rng: &mut SynthRng, shape: &[usize], n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let t = gaussian(rng, shape.to_vec(), 1.0);
            let norm = t.l2_norm();
            t.scale(1.0 / norm)
        })
        .collect()
}

/// `n` unit-norm inputs with non-negative entries.
pub fn unit_inputs_non_negative(rng: &mut SynthRng, shape: &[usize], n: usize) -> Vec<Tensor> {
    unit_inputs(rng, shape, n)
        .into_iter()
        .map(|t| t.map(f64::abs))
        .collect()
}
