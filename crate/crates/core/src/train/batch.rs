use rand::Rng;

use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::network::{RGB_CHANNELS, SAR_CHANNELS};
use crate::tensor::{Element, Tensor};

/// Where and how one sample is cut out of its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl View {
    pub const IDENTITY: View = View { top: 0, left: 0, flip: false };

    /// Random crop offset (when `crop` and the scene is larger than `h×w`)
    /// and a fair-coin horizontal flip (when `flip`).
    pub fn random(s: &SceneSample, h: usize, w: usize, crop: bool, flip: bool, rng: &mut impl Rng) -> View {
        let top = if crop && s.height > h { rng.random_range(0..=s.height - h) } else { 0 };
        let left = if crop && s.width > w { rng.random_range(0..=s.width - w) } else { 0 };
        View {
            top,
            left,
            flip: flip && rng.random_bool(0.5),
        }
    }
}

/// Network-ready tensors for a group of samples; pixel values scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct Batch<T: Element = f32> {
    pub rgb: Tensor<T>,
    pub sar: Tensor<T>,
    pub labels: Vec<u8>,
}

/// Cuts each `h×w` view out of its sample and stacks the results.
pub fn assemble<T: Element>(samples: &[&SceneSample], views: &[View], h: usize, w: usize) -> Result<Batch<T>> {
    if samples.is_empty() || samples.len() != views.len() {
        return Err(Error::Contract(format!(
            "batch needs one view per sample, got {} samples and {} views",
            samples.len(),
            views.len()
        )));
    }
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * RGB_CHANNELS * h * w);
    let mut sar = Vec::with_capacity(n * SAR_CHANNELS * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    let scale = 1.0 / 255.0;
    for (s, v) in samples.iter().zip(views) {
        if v.top + h > s.height || v.left + w > s.width {
            return Err(Error::Config(format!(
                "cannot cut {h}×{w} at ({}, {}) from a {}×{} scene",
                v.top, v.left, s.height, s.width
            )));
        }
        let p = s.pixels();
        let cut = |plane: &[u8], out: &mut dyn FnMut(u8)| {
            for y in v.top..v.top + h {
                let row = &plane[y * s.width + v.left..y * s.width + v.left + w];
                if v.flip {
                    row.iter().rev().for_each(|&b| out(b));
                } else {
                    row.iter().for_each(|&b| out(b));
                }
            }
        };
        for c in 0..RGB_CHANNELS {
            cut(&s.rgb[c * p..(c + 1) * p], &mut |b| rgb.push(T::cast_from(f64::from(b) * scale)));
        }
        cut(&s.sar, &mut |b| sar.push(T::cast_from(f64::from(b) * scale)));
        cut(&s.label, &mut |b| labels.push(b));
    }
    Ok(Batch {
        rgb: Tensor::from_vec(&[n, RGB_CHANNELS, h, w], rgb)?,
        sar: Tensor::from_vec(&[n, SAR_CHANNELS, h, w], sar)?,
        labels,
    })
}
