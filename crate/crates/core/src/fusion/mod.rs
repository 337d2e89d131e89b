//! RGB/SAR feature fusion: the semantic focusing module (per-branch channel
//! gates driven by cross-modal differences), the cascade fusion module
//! (channel then spatial attention merging both branches) and plain
//! pixel-wise addition as the baseline.

mod cfm;
mod sfm;

pub use cfm::{cfm_channel, cfm_forward, cfm_spatial, cfm_spatial_weights, CfmParams, Mlp, SpatialSoftmax};
pub use sfm::{sfm_differentials, sfm_forward, SfmBranch, SfmParams};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Width of the bottleneck in the attention perceptrons: `max(32, ⌈C/16⌉)`.
pub fn hidden_width(channels: usize) -> usize {
    channels.div_ceil(16).max(32)
}

/// Co-shaped RGB and SAR feature maps (`N×C×H×W` each).
#[derive(Debug, Clone)]
pub struct FeaturePair<T: Element = f32> {
    pub rgb: Tensor<T>,
    pub sar: Tensor<T>,
}

impl<T: Element> FeaturePair<T> {
    pub fn new(rgb: Tensor<T>, sar: Tensor<T>) -> Result<Self> {
        if rgb.shape() != sar.shape() {
            return Err(Error::dims("feature pair", rgb.shape(), sar.shape()));
        }
        if rgb.rank() != 4 {
            return Err(Error::Geometry(format!(
                "feature maps must be N×C×H×W, got {:?}",
                rgb.shape()
            )));
        }
        Ok(FeaturePair { rgb, sar })
    }

    pub fn channels(&self) -> usize {
        self.rgb.dim(1)
    }

    pub fn shape(&self) -> &[usize] {
        self.rgb.shape()
    }

    pub fn swapped(&self) -> Self {
        FeaturePair {
            rgb: self.sar.clone(),
            sar: self.rgb.clone(),
        }
    }
}

/// Pixel-wise addition of two equally shaped maps.
pub fn pwa<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::dims("pwa", a.shape(), b.shape()));
    }
    a.add(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_width_rule() {
        assert_eq!(hidden_width(1), 32);
        assert_eq!(hidden_width(256), 32);
        assert_eq!(hidden_width(513), 33);
        assert_eq!(hidden_width(768), 48);
    }

    #[test]
    fn pwa_cases() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![4., 3., 2., 1.]).unwrap();
        assert_eq!(pwa(&a, &b).unwrap().data(), &[5.0; 4]);
        assert_eq!(pwa(&a, &Tensor::zeros(&[2, 2])).unwrap().data(), a.data());
        assert_eq!(pwa(&a, &b).unwrap().to_vec(), pwa(&b, &a).unwrap().to_vec());
        let c = Tensor::<f64>::zeros(&[2, 1]);
        assert!(matches!(pwa(&a, &c), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pair_requires_same_shape() {
        let a = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(FeaturePair::new(a.clone(), b).is_err());
        assert!(FeaturePair::new(a.clone(), a).is_ok());
    }
}
