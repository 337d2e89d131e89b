use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, bilinear_upsample, join, relu, resize_bilinear, ChannelNorm, Conv2d, Module};
use crate::tensor::{Element, Tensor};

/// Pyramid pooling bin sizes applied to the deepest map.
pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// Convolution, channel normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct<T: Element = f32> {
    pub conv: Conv2d<T>,
    pub norm: ChannelNorm<T>,
}

impl<T: Element> ConvNormAct<T> {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        ConvNormAct {
            conv: Conv2d::he(cin, cout, k, 1, k / 2, rng),
            norm: ChannelNorm::new(cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.norm.forward(&self.conv.forward(x)?)?))
    }
}

impl<T: Element> Module<T> for ConvNormAct<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// UPerNet-style head: pyramid pooling on the deepest level, a top-down
/// feature pyramid over the others, all levels concatenated at the
/// shallowest scale, then a per-pixel classifier.
#[derive(Debug, Clone)]
pub struct UperHead<T: Element = f32> {
    pub ppm: Vec<ConvNormAct<T>>,
    pub bottleneck: ConvNormAct<T>,
    pub lateral: Vec<ConvNormAct<T>>,
    pub smooth: Vec<ConvNormAct<T>>,
    pub fuse: ConvNormAct<T>,
    pub classifier: Conv2d<T>,
    /// Factor from the shallowest level back to input resolution.
    pub upsample: usize,
}

impl<T: Element> UperHead<T> {
    pub fn new(widths: &[usize], width: usize, num_classes: usize, upsample: usize, rng: &mut impl Rng) -> Self {
        let deep = *widths.last().expect("at least one level");
        let shallow = &widths[..widths.len() - 1];
        UperHead {
            ppm: PPM_BINS.iter().map(|_| ConvNormAct::new(deep, width, 1, rng)).collect(),
            bottleneck: ConvNormAct::new(deep + PPM_BINS.len() * width, width, 3, rng),
            lateral: shallow.iter().map(|&c| ConvNormAct::new(c, width, 1, rng)).collect(),
            smooth: shallow.iter().map(|_| ConvNormAct::new(width, width, 3, rng)).collect(),
            fuse: ConvNormAct::new(widths.len() * width, width, 3, rng),
            classifier: Conv2d::he(width, num_classes, 1, 1, 0, rng),
            upsample,
        }
    }

    fn levels(&self) -> usize {
        self.lateral.len() + 1
    }

    /// `features` ordered shallow to deep; each level exactly half the
    /// extent of the previous one.
    pub fn forward(&self, features: &[Tensor<T>]) -> Result<Tensor<T>> {
        if features.len() != self.levels() {
            return Err(Error::Contract(format!(
                "decoder expects {} feature maps, got {}",
                self.levels(),
                features.len()
            )));
        }
        for pair in features.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.rank() != 4 || b.rank() != 4 || a.dim(2) != 2 * b.dim(2) || a.dim(3) != 2 * b.dim(3) {
                return Err(Error::Geometry(format!(
                    "decoder inputs must be dyadic, got {:?} then {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }

        let deepest = features.last().unwrap();
        let (h, w) = (deepest.dim(2), deepest.dim(3));
        let mut pooled = vec![deepest.clone()];
        for (&bins, layer) in PPM_BINS.iter().zip(&self.ppm) {
            let p = layer.forward(&adaptive_avg_pool(deepest, bins, bins)?)?;
            pooled.push(resize_bilinear(&p, h, w)?);
        }
        let refs: Vec<&Tensor<T>> = pooled.iter().collect();
        let top = self.bottleneck.forward(&Tensor::concat(&refs, 1)?)?;

        let mut inner: Vec<Tensor<T>> = features[..self.lateral.len()]
            .iter()
            .zip(&self.lateral)
            .map(|(f, l)| l.forward(f))
            .collect::<Result<_>>()?;
        inner.push(top);
        for i in (0..self.lateral.len()).rev() {
            let (h, w) = (inner[i].dim(2), inner[i].dim(3));
            let up = resize_bilinear(&inner[i + 1], h, w)?;
            inner[i] = inner[i].add(&up)?;
        }

        let (h0, w0) = (features[0].dim(2), features[0].dim(3));
        let mut outs = Vec::with_capacity(self.levels());
        for (i, s) in self.smooth.iter().enumerate() {
            outs.push(s.forward(&inner[i])?);
        }
        outs.push(inner[self.lateral.len()].clone());
        for o in outs.iter_mut().skip(1) {
            *o = resize_bilinear(o, h0, w0)?;
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let fused = self.fuse.forward(&Tensor::concat(&refs, 1)?)?;
        bilinear_upsample(&self.classifier.forward(&fused)?, self.upsample)
    }
}

impl<T: Element> Module<T> for UperHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ppm.visit_params(&join(prefix, "ppm"), f);
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        self.lateral.visit_params(&join(prefix, "lateral"), f);
        self.smooth.visit_params(&join(prefix, "smooth"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.classifier.visit_params(&join(prefix, "classifier"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ppm.visit_params_mut(&join(prefix, "ppm"), f);
        self.bottleneck.visit_params_mut(&join(prefix, "bottleneck"), f);
        self.lateral.visit_params_mut(&join(prefix, "lateral"), f);
        self.smooth.visit_params_mut(&join(prefix, "smooth"), f);
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
        self.classifier.visit_params_mut(&join(prefix, "classifier"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pyramid(rng: &mut ChaCha8Rng, widths: &[usize], size: usize) -> Vec<Tensor<f64>> {
        widths
            .iter()
            .enumerate()
            .map(|(i, &c)| random(rng, &[1, c, size >> (i + 1), size >> (i + 1)]))
            .collect()
    }

    #[test]
    fn output_at_input_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = UperHead::<f64>::new(&[2, 3, 4, 5], 6, 3, 2, &mut rng);
        let y = head.forward(&pyramid(&mut rng, &[2, 3, 4, 5], 32)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
    }

    #[test]
    fn zero_classifier_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = UperHead::<f64>::new(&[2, 2, 2, 2], 4, 3, 2, &mut rng);
        head.classifier = Conv2d::from_parts(
            Tensor::zeros(&[3, 4, 1, 1]),
            Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap(),
            1,
            0,
        )
        .unwrap();
        let feats: Vec<_> = (0..4).map(|i| Tensor::full(&[1, 2, 16 >> i, 16 >> i], 0.3)).collect();
        let y = head.forward(&feats).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        for (plane, expect) in y.data().chunks(1024).zip([0.5, -1.0, 2.0]) {
            assert!(plane.iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_non_dyadic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = UperHead::<f64>::new(&[2, 2, 2, 2], 4, 2, 2, &mut rng);
        let mut feats = pyramid(&mut rng, &[2, 2, 2, 2], 32);
        feats[2] = random(&mut rng, &[1, 2, 3, 4]);
        assert!(matches!(head.forward(&feats), Err(Error::Geometry(_))));
        assert!(matches!(head.forward(&feats[..3]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let widths = [2, 2, 3, 3];
        let head = UperHead::<f64>::new(&widths, 3, 2, 2, &mut rng);
        let mut inputs = pyramid(&mut rng, &widths, 16);
        let n_feats = inputs.len();
        inputs.extend(head.named_params().into_iter().map(|(_, t)| t.detach()));
        let w: Vec<f64> = (0..2 * 16 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let check = GradCheck {
            max_coords: Some(24),
            ..GradCheck::default()
        };
        let report = check
            .run(
                |t| {
                    let mut h = head.clone();
                    let mut i = n_feats;
                    h.visit_params_mut("", &mut |_, slot| {
                        *slot = t[i].clone();
                        i += 1;
                    });
                    h.forward(&t[..n_feats])?.weighted_sum(&w)
                },
                &inputs,
            )
            .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
