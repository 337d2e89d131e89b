use rand::Rng;

use super::{hidden_width, FeaturePair};
use crate::error::{Error, Result};
use crate::nn::{gelu, global_pool, init::FUSION_STD, join, sigmoid, Conv2d, Module, PoolMode};
use crate::tensor::{Element, Tensor};

/// Channel perceptron of one branch: 1×1 reduce to the hidden width, GELU,
/// 1×1 expand back to `C`.
#[derive(Debug, Clone)]
pub struct SfmBranch<T: Element = f32> {
    pub reduce: Conv2d<T>,
    pub expand: Conv2d<T>,
}

impl<T: Element> SfmBranch<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        let h = hidden_width(c);
        SfmBranch {
            reduce: Conv2d::init(c, h, 1, 1, 0, FUSION_STD, rng),
            expand: Conv2d::init(h, c, 1, 1, 0, FUSION_STD, rng),
        }
    }

    fn zeros(c: usize) -> Self {
        let h = hidden_width(c);
        SfmBranch {
            reduce: Conv2d::zeros(c, h, 1, 1, 0),
            expand: Conv2d::zeros(h, c, 1, 1, 0),
        }
    }

    /// Gate logits `s₂` from the pooled differential `s₁` (`N×C×1×1`).
    fn gate_logits(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        self.expand.forward(&gelu(&self.reduce.forward(pooled)?))
    }

    fn channels(&self) -> usize {
        self.reduce.in_channels()
    }
}

impl<T: Element> Module<T> for SfmBranch<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        self.expand.visit_params(&join(prefix, "expand"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.reduce.visit_params_mut(&join(prefix, "reduce"), f);
        self.expand.visit_params_mut(&join(prefix, "expand"), f);
    }
}

/// Two independent branch perceptrons (no shared parameters).
#[derive(Debug, Clone)]
pub struct SfmParams<T: Element = f32> {
    pub rgb: SfmBranch<T>,
    pub sar: SfmBranch<T>,
}

impl<T: Element> SfmParams<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        SfmParams {
            rgb: SfmBranch::new(channels, rng),
            sar: SfmBranch::new(channels, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        SfmParams {
            rgb: SfmBranch::zeros(channels),
            sar: SfmBranch::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.rgb.channels()
    }

    /// Same parameters with the branch roles exchanged.
    pub fn swapped(&self) -> Self {
        SfmParams {
            rgb: self.sar.clone(),
            sar: self.rgb.clone(),
        }
    }
}

impl<T: Element> Module<T> for SfmParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.rgb.visit_params(&join(prefix, "rgb"), f);
        self.sar.visit_params(&join(prefix, "sar"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.rgb.visit_params_mut(&join(prefix, "rgb"), f);
        self.sar.visit_params_mut(&join(prefix, "sar"), f);
    }
}

/// Differential maps `(F_RGB − F_SAR, F_SAR − F_RGB)`.
pub fn sfm_differentials<T: Element>(pair: &FeaturePair<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((pair.rgb.sub(&pair.sar)?, pair.sar.sub(&pair.rgb)?))
}

/// Re-weights each branch's channels by a sigmoid gate computed from the
/// global max of its differential map.
pub fn sfm_forward<T: Element>(pair: &FeaturePair<T>, p: &SfmParams<T>) -> Result<FeaturePair<T>> {
    if pair.channels() != p.channels() {
        return Err(Error::dims("sfm", pair.shape(), &[p.channels()]));
    }
    let (diff_rgb, diff_sar) = sfm_differentials(pair)?;
    let gate_rgb = sigmoid(&p.rgb.gate_logits(&global_pool(&diff_rgb, PoolMode::Max)?)?);
    let gate_sar = sigmoid(&p.sar.gate_logits(&global_pool(&diff_sar, PoolMode::Max)?)?);
    Ok(FeaturePair {
        rgb: pair.rgb.mul(&gate_rgb)?,
        sar: pair.sar.mul(&gate_sar)?,
    })
}
