//! Shared helpers for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::network::{Activation, FlatWeights, NetworkSpec, OutputMode};

/// Straight-line forward pass reading weights by explicit index arithmetic,
/// independent of the production implementation.
pub fn naive_forward(spec: &NetworkSpec, w: &[f64], x: &[f64]) -> Vec<f64> {
    let sizes = spec.layer_sizes();
    let mut a = x.to_vec();
    let mut base = 0;
    for l in 0..sizes.len() - 1 {
        let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
        let mut z = vec![0.0; fan_out];
        for r in 0..fan_out {
            let mut s = w[base + fan_out * fan_in + r];
            for c in 0..fan_in {
                s += w[base + r * fan_in + c] * a[c];
            }
            z[r] = s;
        }
        base += fan_out * fan_in + fan_out;
        let last = l + 2 == sizes.len();
        a = if last {
            match spec.output_mode() {
                OutputMode::Identity => z,
                OutputMode::Softmax => {
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
            }
        } else {
            z.iter()
                .map(|&v| match spec.hidden_activation() {
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                    Activation::Identity => v,
                })
                .collect()
        };
    }
    a
}

pub fn tanh_net(sizes: &[usize], seed: u64) -> (NetworkSpec, FlatWeights) {
    let spec = NetworkSpec::new(sizes.to_vec(), Activation::Tanh, OutputMode::Softmax).unwrap();
    let w = FlatWeights::init(&spec, seed);
    (spec, w)
}

pub fn random_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = crate::linalg::norm(&v);
    v.into_iter().map(|x| x / len).collect()
}
