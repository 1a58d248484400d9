use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ImageSet, Normalization};
use crate::error::{arg_err, Result};
use crate::tensor::{real, Real, Tensor};

/// Which portion of the data a batch was drawn from. Search asserts that
/// architecture updates only see `Val` and weight updates only see `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub split: Split,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Training-time augmentation. Each component can be switched off on its own.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Zero padding before a random crop back to the original size; 0 disables.
    pub crop_padding: usize,
    pub flip: bool,
    /// Side of the cutout square; 0 disables.
    pub cutout: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_padding: 4,
            flip: true,
            cutout: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            crop_padding: 0,
            flip: false,
            cutout: 0,
        }
    }
}

/// Crops an `h×w` window at offset `(dy, dx)` out of the image zero-padded
/// by `pad` on every side.
pub fn pad_crop(img: &[f32], [c, h, w]: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(img: &[f32], [c, h, w]: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = img[row * w + (w - 1 - x)];
        }
    }
    out
}

/// Zeros a `size×size` square centered at `(cy, cx)`, clipped to the image,
/// in every channel. `size == 0` leaves the image untouched.
pub fn cutout<T: Real>(img: &mut [T], [c, h, w]: [usize; 3], size: usize, (cy, cx): (usize, usize)) {
    if size == 0 {
        return;
    }
    let half = size / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + size - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + size - half).min(w));
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                img[(ch * h + y) * w + x] = T::zero();
            }
        }
    }
}

fn augment_one<T: Real>(
    raw: &[u8],
    chw: [usize; 3],
    norm: &Normalization,
    policy: &AugmentPolicy,
    rng: &mut dyn RngCore,
) -> Vec<T> {
    let [c, h, w] = chw;
    let mut img: Vec<f32> = raw.iter().map(|&p| f32::from(p) / 255.0).collect();
    if policy.crop_padding > 0 {
        let span = 2 * policy.crop_padding;
        let (dy, dx) = (rng.gen_range(0..=span), rng.gen_range(0..=span));
        img = pad_crop(&img, chw, policy.crop_padding, dy, dx);
    }
    if policy.flip && rng.gen_bool(0.5) {
        img = hflip(&img, chw);
    }
    let mut out = normalize(&img, chw, norm);
    if policy.cutout > 0 {
        let center = (rng.gen_range(0..h), rng.gen_range(0..w));
        cutout(&mut out, [c, h, w], policy.cutout, center);
    }
    out
}

fn normalize<T: Real>(img: &[f32], [_, h, w]: [usize; 3], norm: &Normalization) -> Vec<T> {
    let plane = h * w;
    img.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / plane;
            real((f64::from(v) - norm.mean[ch]) / norm.std[ch])
        })
        .collect()
}

/// Builds an NCHW batch from `indices`. With a policy the augmentation
/// randomness is drawn from the generator in sample order; without one only
/// normalization is applied.
pub fn make_batch<T: Real>(
    set: &ImageSet,
    indices: &[usize],
    norm: &Normalization,
    mut augment: Option<(&AugmentPolicy, &mut dyn RngCore)>,
    split: Split,
) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(arg_err("cannot build an empty batch"));
    }
    let chw = [set.channels, set.height, set.width];
    let mut data = Vec::with_capacity(indices.len() * set.image_len());
    for &i in indices {
        let raw = set.image(i);
        match augment.as_mut() {
            Some((p, rng)) => data.extend(augment_one::<T>(raw, chw, norm, p, &mut **rng)),
            None => {
                let img: Vec<f32> = raw.iter().map(|&p| f32::from(p) / 255.0).collect();
                data.extend(normalize::<T>(&img, chw, norm));
            }
        }
    }
    Ok(Batch {
        split,
        images: Tensor::new(vec![indices.len(), chw[0], chw[1], chw[2]], data)?,
        labels: indices.iter().map(|&i| set.labels[i]).collect(),
    })
}
