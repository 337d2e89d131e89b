use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{hidden_width, FeaturePair};
use crate::error::{Error, Result};
use crate::nn::{gelu, global_pool, init::FUSION_STD, join, sigmoid, softmax, Conv2d, Module, PoolMode};
use crate::tensor::{Element, Tensor};

/// How the two spatial score maps are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialSoftmax {
    /// Per pixel, a two-way softmax across the RGB and SAR scores.
    #[default]
    Modality,
    /// Each score map normalized over its own H·W positions.
    Spatial,
}

impl FromStr for SpatialSoftmax {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modality" => Ok(SpatialSoftmax::Modality),
            "spatial" => Ok(SpatialSoftmax::Spatial),
            other => Err(Error::Config(format!(
                "unknown spatial softmax mode `{other}` (expected `modality` or `spatial`)"
            ))),
        }
    }
}

/// Two 1×1 convolutions with GELU between.
#[derive(Debug, Clone)]
pub struct Mlp<T: Element = f32> {
    pub fc1: Conv2d<T>,
    pub fc2: Conv2d<T>,
}

impl<T: Element> Mlp<T> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        let h = hidden_width(c);
        Mlp {
            fc1: Conv2d::init(c, h, 1, 1, 0, FUSION_STD, rng),
            fc2: Conv2d::init(h, c, 1, 1, 0, FUSION_STD, rng),
        }
    }

    fn zeros(c: usize) -> Self {
        let h = hidden_width(c);
        Mlp {
            fc1: Conv2d::zeros(c, h, 1, 1, 0),
            fc2: Conv2d::zeros(h, c, 1, 1, 0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?))
    }
}

impl<T: Element> Module<T> for Mlp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct CfmParams<T: Element = f32> {
    /// 2C → C, 1×1.
    pub channel_fuse: Conv2d<T>,
    pub mlp_rgb: Mlp<T>,
    pub mlp_sar: Mlp<T>,
    /// 2C → 1, 7×7.
    pub spatial_fuse: Conv2d<T>,
    /// 1 → 1, 7×7 each.
    pub score_rgb: Conv2d<T>,
    pub score_sar: Conv2d<T>,
    pub mode: SpatialSoftmax,
}

impl<T: Element> CfmParams<T> {
    pub fn new(channels: usize, mode: SpatialSoftmax, rng: &mut impl Rng) -> Self {
        let c = channels;
        CfmParams {
            channel_fuse: Conv2d::init(2 * c, c, 1, 1, 0, FUSION_STD, rng),
            mlp_rgb: Mlp::new(c, rng),
            mlp_sar: Mlp::new(c, rng),
            spatial_fuse: Conv2d::same(2 * c, 1, 7, FUSION_STD, rng),
            score_rgb: Conv2d::same(1, 1, 7, FUSION_STD, rng),
            score_sar: Conv2d::same(1, 1, 7, FUSION_STD, rng),
            mode,
        }
    }

    pub fn zeros(channels: usize, mode: SpatialSoftmax) -> Self {
        let c = channels;
        CfmParams {
            channel_fuse: Conv2d::zeros(2 * c, c, 1, 1, 0),
            mlp_rgb: Mlp::zeros(c),
            mlp_sar: Mlp::zeros(c),
            spatial_fuse: Conv2d::zeros(2 * c, 1, 7, 1, 3),
            score_rgb: Conv2d::zeros(1, 1, 7, 1, 3),
            score_sar: Conv2d::zeros(1, 1, 7, 1, 3),
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_fuse.out_channels()
    }
}

impl<T: Element> Module<T> for CfmParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.channel_fuse.visit_params(&join(prefix, "channel_fuse"), f);
        self.mlp_rgb.visit_params(&join(prefix, "mlp_rgb"), f);
        self.mlp_sar.visit_params(&join(prefix, "mlp_sar"), f);
        self.spatial_fuse.visit_params(&join(prefix, "spatial_fuse"), f);
        self.score_rgb.visit_params(&join(prefix, "score_rgb"), f);
        self.score_sar.visit_params(&join(prefix, "score_sar"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.channel_fuse.visit_params_mut(&join(prefix, "channel_fuse"), f);
        self.mlp_rgb.visit_params_mut(&join(prefix, "mlp_rgb"), f);
        self.mlp_sar.visit_params_mut(&join(prefix, "mlp_sar"), f);
        self.spatial_fuse.visit_params_mut(&join(prefix, "spatial_fuse"), f);
        self.score_rgb.visit_params_mut(&join(prefix, "score_rgb"), f);
        self.score_sar.visit_params_mut(&join(prefix, "score_sar"), f);
    }
}

fn check<T: Element>(pair: &FeaturePair<T>, p: &CfmParams<T>) -> Result<()> {
    if pair.channels() != p.channels() {
        return Err(Error::dims("cfm", pair.shape(), &[p.channels()]));
    }
    Ok(())
}

/// Channel stage: a shared descriptor `s` (global average of the fused
/// channels) drives a separate sigmoid gate for each branch.
pub fn cfm_channel<T: Element>(pair: &FeaturePair<T>, p: &CfmParams<T>) -> Result<FeaturePair<T>> {
    check(pair, p)?;
    let fused = p.channel_fuse.forward(&Tensor::concat(&[&pair.rgb, &pair.sar], 1)?)?;
    let s = global_pool(&fused, PoolMode::Avg)?;
    let gate_rgb = sigmoid(&p.mlp_rgb.forward(&s)?);
    let gate_sar = sigmoid(&p.mlp_sar.forward(&s)?);
    Ok(FeaturePair {
        rgb: pair.rgb.mul(&gate_rgb)?,
        sar: pair.sar.mul(&gate_sar)?,
    })
}

/// Spatial weight maps `(wʳ, wˢ)`, each `N×1×H×W`, for an already
/// channel-gated pair.
pub fn cfm_spatial_weights<T: Element>(pair: &FeaturePair<T>, p: &CfmParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    check(pair, p)?;
    let z = p.spatial_fuse.forward(&Tensor::concat(&[&pair.rgb, &pair.sar], 1)?)?;
    let a_rgb = p.score_rgb.forward(&z)?;
    let a_sar = p.score_sar.forward(&z)?;
    match p.mode {
        SpatialSoftmax::Modality => {
            let w = softmax(&Tensor::concat(&[&a_rgb, &a_sar], 1)?, 1)?;
            Ok((w.narrow(1, 0, 1)?, w.narrow(1, 1, 1)?))
        }
        SpatialSoftmax::Spatial => {
            let shape = a_rgb.shape().to_vec();
            let flat = [shape[0], 1, shape[2] * shape[3]];
            let norm = |a: &Tensor<T>| softmax(&a.reshape(&flat)?, 2)?.reshape(&shape);
            Ok((norm(&a_rgb)?, norm(&a_sar)?))
        }
    }
}

/// Spatial stage: each branch scaled by its weight map (broadcast over channels).
pub fn cfm_spatial<T: Element>(pair: &FeaturePair<T>, p: &CfmParams<T>) -> Result<FeaturePair<T>> {
    let (w_rgb, w_sar) = cfm_spatial_weights(pair, p)?;
    Ok(FeaturePair {
        rgb: pair.rgb.mul(&w_rgb)?,
        sar: pair.sar.mul(&w_sar)?,
    })
}

/// Channel stage, spatial stage, then the sum of both branches.
pub fn cfm_forward<T: Element>(pair: &FeaturePair<T>, p: &CfmParams<T>) -> Result<Tensor<T>> {
    let gated = cfm_spatial(&cfm_channel(pair, p)?, p)?;
    gated.rgb.add(&gated.sar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> FeaturePair<f64> {
        FeaturePair::new(random(rng, shape), random(rng, shape)).unwrap()
    }

    /// Scales every parameter up so the attention paths are far from trivial.
    fn amplified(p: &CfmParams<f64>, factor: f64) -> CfmParams<f64> {
        let mut q = p.clone();
        q.visit_params_mut("", &mut |_, t| {
            *t = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * factor).collect()).unwrap();
        });
        q
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("spatial".parse::<SpatialSoftmax>().unwrap(), SpatialSoftmax::Spatial);
        assert_eq!("modality".parse::<SpatialSoftmax>().unwrap(), SpatialSoftmax::Modality);
        assert!(matches!("both".parse::<SpatialSoftmax>(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_channel_stage_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = random_pair(&mut rng, &[1, 3, 4, 4]);
        let out = cfm_channel(&pair, &CfmParams::zeros(3, SpatialSoftmax::Modality)).unwrap();
        for (o, i) in out.rgb.data().iter().zip(pair.rgb.data()) {
            assert_eq!(*o, 0.5 * i);
        }
        for (o, i) in out.sar.data().iter().zip(pair.sar.data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn saturated_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pair = random_pair(&mut rng, &[1, 2, 3, 3]);
        let mut p = CfmParams::<f64>::zeros(2, SpatialSoftmax::Modality);
        p.mlp_rgb.fc2.bias = Tensor::full(&[2], 1000.0);
        p.mlp_sar.fc2.bias = Tensor::full(&[2], -1000.0);
        let out = cfm_channel(&pair, &p).unwrap();
        assert!(out.rgb.max_abs_diff(&pair.rgb) < 1e-12);
        assert!(out.sar.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_spatial_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pair = random_pair(&mut rng, &[1, 2, 2, 2]);
        let half = cfm_spatial(&pair, &CfmParams::zeros(2, SpatialSoftmax::Modality)).unwrap();
        let quarter = cfm_spatial(&pair, &CfmParams::zeros(2, SpatialSoftmax::Spatial)).unwrap();
        for ((h, q), i) in half.rgb.data().iter().zip(quarter.rgb.data()).zip(pair.rgb.data()) {
            assert_eq!(*h, 0.5 * i);
            assert_eq!(*q, 0.25 * i);
        }
    }

    #[test]
    fn zero_params_full_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pair = random_pair(&mut rng, &[2, 3, 5, 5]);
        let out = cfm_forward(&pair, &CfmParams::zeros(3, SpatialSoftmax::Modality)).unwrap();
        let expect = pair.rgb.add(&pair.sar).unwrap().scale(0.25);
        assert!(out.max_abs_diff(&expect) < 1e-15);
        let same = FeaturePair::new(pair.rgb.clone(), pair.rgb.clone()).unwrap();
        let out = cfm_forward(&same, &CfmParams::zeros(3, SpatialSoftmax::Modality)).unwrap();
        assert!(out.max_abs_diff(&pair.rgb.scale(0.5)) < 1e-15);
    }

    #[test]
    fn modality_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = amplified(&CfmParams::<f64>::new(3, SpatialSoftmax::Modality, &mut rng), 40.0);
        let pair = random_pair(&mut rng, &[2, 3, 6, 6]);
        let (wr, ws) = cfm_spatial_weights(&pair, &p).unwrap();
        assert_eq!(wr.shape(), &[2, 1, 6, 6]);
        for (a, b) in wr.data().iter().zip(ws.data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
            assert!(*a >= 0.0 && *b >= 0.0);
        }
        assert!(wr.data().iter().any(|&v| (v - 0.5).abs() > 1e-3));
    }

    #[test]
    fn spatial_weights_sum_to_one_per_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let p = amplified(&CfmParams::<f64>::new(2, SpatialSoftmax::Spatial, &mut rng), 40.0);
        let pair = random_pair(&mut rng, &[2, 2, 3, 4]);
        let (wr, ws) = cfm_spatial_weights(&pair, &p).unwrap();
        for w in [wr, ws] {
            for plane in w.data().chunks(12) {
                assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branches_do_not_share_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = CfmParams::<f32>::new(4, SpatialSoftmax::Modality, &mut rng);
        let named = p.named_params();
        let mut ids: Vec<usize> = named.iter().map(|(_, t)| t.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), named.len());
        assert_ne!(p.score_rgb.weight.to_vec(), p.score_sar.weight.to_vec());
        assert_eq!(p.spatial_fuse.weight.shape(), &[1, 8, 7, 7]);
        assert_eq!(p.score_rgb.weight.shape(), &[1, 1, 7, 7]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let pair = random_pair(&mut rng, &[1, 2, 4, 4]);
        for mode in [SpatialSoftmax::Modality, SpatialSoftmax::Spatial] {
            let p = amplified(&CfmParams::<f64>::new(2, mode, &mut rng), 20.0);
            // a per-map score offset cancels in the spatial softmax, so
            // those biases have an exactly zero gradient
            let invariant = |name: &str| mode == SpatialSoftmax::Spatial && name.starts_with("score_") && name.ends_with("bias");
            let mut inputs = vec![pair.rgb.clone(), pair.sar.clone()];
            inputs.extend(p.named_params().into_iter().filter(|(n, _)| !invariant(n)).map(|(_, t)| t.detach()));
            let w: Vec<f64> = (0..32).map(|i| (i as f64 * 0.61).cos()).collect();
            let report = GradCheck::default()
                .run(
                    |t| {
                        let mut q = p.clone();
                        let mut i = 2;
                        q.visit_params_mut("", &mut |name, slot| {
                            if !invariant(name) {
                                *slot = t[i].clone();
                                i += 1;
                            }
                        });
                        cfm_forward(&FeaturePair::new(t[0].clone(), t[1].clone())?, &q)?.weighted_sum(&w)
                    },
                    &inputs,
                )
                .unwrap();
            assert!(report.passed, "{mode:?}: {report:?}");
            if mode == SpatialSoftmax::Spatial {
                let mut q = p.clone();
                q.visit_params_mut("", &mut |_, slot| *slot = slot.detach().with_grad());
                cfm_forward(&pair, &q).unwrap().weighted_sum(&w).unwrap().backward().unwrap();
                for b in [&q.score_rgb.bias, &q.score_sar.bias] {
                    assert!(b.grad().unwrap()[0].abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn both_inputs_receive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = CfmParams::<f64>::new(2, SpatialSoftmax::Modality, &mut rng);
        let a = random(&mut rng, &[1, 2, 4, 4]).with_grad();
        let b = random(&mut rng, &[1, 2, 4, 4]).with_grad();
        cfm_forward(&FeaturePair::new(a.clone(), b.clone()).unwrap(), &p)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        assert!(a.grad().unwrap().iter().any(|g| *g != 0.0));
        assert!(b.grad().unwrap().iter().any(|g| *g != 0.0));
    }
}
