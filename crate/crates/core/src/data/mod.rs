//! Image datasets: CIFAR binary archives, a synthetic toy generator,
//! stratified splits and the training augmentation pipeline.

mod augment;
mod cifar;
mod split;
mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

pub use augment::{cutout, hflip, make_batch, pad_crop, AugmentPolicy, Batch, Split};
pub use cifar::{decode_records, encode_records, load_cifar, CifarOptions, CifarVariant, FileDigest};
pub use split::make_splits;
pub use toy::{toy_dataset, ToySpec};

/// Raw 8-bit images, channel-major per image, with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    /// CIFAR-100 superclass labels, when the source provides them.
    pub coarse_labels: Option<Vec<usize>>,
}

impl ImageSet {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(arg_err(format!(
                "{} pixel bytes do not hold {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(ImageSet {
            channels,
            height,
            width,
            pixels,
            labels,
            coarse_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse_labels: self.coarse_labels.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn from_images(set: &ImageSet) -> Self {
        let plane = set.height * set.width;
        let mut sum = vec![0.0f64; set.channels];
        let mut sq = vec![0.0f64; set.channels];
        for i in 0..set.len() {
            for (c, chunk) in set.image(i).chunks(plane).enumerate() {
                for &p in chunk {
                    let v = f64::from(p) / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (set.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Normalization { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Train and test images with statistics taken from the training portion.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub train: ImageSet,
    pub test: ImageSet,
    pub norm: Normalization,
    pub provenance: Vec<FileDigest>,
}

impl Dataset {
    pub fn new(name: &str, num_classes: usize, train: ImageSet, test: ImageSet, provenance: Vec<FileDigest>) -> Self {
        let norm = Normalization::from_images(&train);
        Dataset {
            name: name.to_string(),
            num_classes,
            train,
            test,
            norm,
            provenance,
        }
    }
}
