//! The canonical toy decoder and its synthetic inputs.
//!
//! Six transposed-convolution layers (K=4, S=2, P=1) upsample a 256-channel
//! 2x2 latent through 4, 8, 16, 32, 64 to a 3x128x128 output, LeakyReLU 0.2
//! between layers. Weights are seeded Gaussians scaled for roughly
//! unit-variance activations; an optional outlier injection multiplies a
//! random 2% of each hidden layer's output channels by 16 to reproduce
//! long-tailed channel distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use avq_core::tensor::{DecoderLayer, DecoderModel, LayerKind, LayerSpec, Tensor3, WeightTensor};

pub const LATENT_CHANNELS: usize = 256;
pub const LATENT_WIDTH: usize = 2;
pub const CHANNEL_CHAIN: [usize; 7] = [256, 128, 64, 32, 16, 8, 3];
pub const LEAKY_SLOPE: f32 = 0.2;
pub const OUTLIER_GAIN: f32 = 16.0;
pub const OUTLIER_FRACTION: f64 = 0.02;

/// Deterministic decoder for a seed; same seed, bit-identical model.
pub fn canonical_decoder(seed: u64, outlier_injection: bool) -> DecoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(6);
    for (i, pair) in CHANNEL_CHAIN.windows(2).enumerate() {
        let (c_in, c_out) = (pair[0], pair[1]);
        let last = i == CHANNEL_CHAIN.len() - 2;
        let slope = if last { None } else { Some(LEAKY_SLOPE) };
        let spec = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, slope).unwrap();
        // Effective fan-in of a stride-2 K=4 transposed conv is
        // C_in * (K/S)^2; the gain compensates the LeakyReLU attenuation.
        let fan_eff = (c_in * 4) as f64;
        let gain = 2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2));
        let std = (gain / fan_eff).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let data: Vec<f32> = (0..c_in * c_out * 16)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        let weights = WeightTensor::new(c_in, c_out, 4, 4, data).unwrap();
        let bias_dist = Normal::new(0.0, 0.05).unwrap();
        let bias: Vec<f32> = (0..c_out).map(|_| bias_dist.sample(&mut rng) as f32).collect();
        layers.push(DecoderLayer::new(spec, weights, bias).unwrap());
    }
    if outlier_injection {
        // Blow up a random 2% of every hidden layer's output channels and
        // divide the consuming layer's matching input slices, so the
        // long-tailed channel disparities show up in every intermediate
        // activation without compounding through depth or changing the
        // function the decoder computes.
        for i in 0..layers.len() - 1 {
            let c_out = layers[i].weights.out_channels;
            let n_hot = ((OUTLIER_FRACTION * c_out as f64).round() as usize).max(1);
            let mut hot = Vec::new();
            while hot.len() < n_hot {
                let c = rng.random_range(0..c_out);
                if !hot.contains(&c) {
                    hot.push(c);
                }
            }
            for &c in &hot {
                let producer = &mut layers[i];
                for ci in 0..producer.weights.in_channels {
                    for u in 0..4 {
                        for v in 0..4 {
                            *producer.weights.at_mut(ci, c, u, v) *= OUTLIER_GAIN;
                        }
                    }
                }
                producer.bias[c] *= OUTLIER_GAIN;
                let consumer = &mut layers[i + 1];
                for co in 0..consumer.weights.out_channels {
                    for u in 0..4 {
                        for v in 0..4 {
                            *consumer.weights.at_mut(c, co, u, v) /= OUTLIER_GAIN;
                        }
                    }
                }
            }
        }
    }
    DecoderModel::new(layers).unwrap()
}

/// Seeded Gaussian latent batch.
pub fn latents(seed: u64, count: usize) -> Vec<Tensor3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..count)
        .map(|_| {
            let data: Vec<f32> = (0..LATENT_CHANNELS * LATENT_WIDTH * LATENT_WIDTH)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Tensor3::new(LATENT_CHANNELS, LATENT_WIDTH, LATENT_WIDTH, data).unwrap()
        })
        .collect()
}
