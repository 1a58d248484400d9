use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FileDigest, ImageSet};

/// Synthetic Gaussian-blob images. Class `k` places a bright blob near a
/// point on a circle around the image center; jitter and pixel noise make
/// the task non-trivial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    /// Total samples, split between train and test by `test_fraction`.
    pub samples: usize,
    pub test_fraction: f64,
    pub jitter: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 2,
            size: 8,
            channels: 3,
            samples: 1000,
            test_fraction: 0.2,
            jitter: 0.9,
            noise: 0.12,
            seed: 7,
        }
    }
}

fn render(spec: &ToySpec, label: usize, rng: &mut ChaCha8Rng, jitter: &Normal<f64>, noise: &Normal<f64>) -> Vec<u8> {
    let s = spec.size as f64;
    // Starting at the top keeps two-class data invariant under horizontal flips.
    let angle = PI / 2.0 + 2.0 * PI * label as f64 / spec.classes as f64;
    let (cy, cx) = (
        (s - 1.0) / 2.0 + s / 4.0 * angle.sin() + jitter.sample(rng),
        (s - 1.0) / 2.0 + s / 4.0 * angle.cos() + jitter.sample(rng),
    );
    let sigma = s / 6.0;
    let mut img = vec![0u8; spec.channels * spec.size * spec.size];
    for c in 0..spec.channels {
        let tint = 0.85 + 0.15 * (c as f64 / spec.channels.max(1) as f64);
        for y in 0..spec.size {
            for x in 0..spec.size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = 0.15 + 0.7 * tint * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(rng);
                img[(c * spec.size + y) * spec.size + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// Generates the dataset; identical specs give identical bytes.
pub fn toy_dataset(spec: &ToySpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).expect("finite jitter");
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let n_test = (spec.samples as f64 * spec.test_fraction).round() as usize;
    let mut make = |n: usize| {
        let mut pixels = Vec::with_capacity(n * spec.channels * spec.size * spec.size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Balanced classes, interleaved; order is shuffled by the loaders.
            let label = i % spec.classes;
            pixels.extend(render(spec, label, &mut rng, &jitter, &noise));
            labels.push(label);
        }
        ImageSet::new(spec.channels, spec.size, spec.size, pixels, labels).expect("consistent toy shapes")
    };
    let train = make(spec.samples - n_test);
    let test = make(n_test);
    let provenance = vec![
        FileDigest::of_bytes("toy-train", &train.pixels),
        FileDigest::of_bytes("toy-test", &test.pixels),
    ];
    Dataset::new("toy", spec.classes, train, test, provenance)
}
