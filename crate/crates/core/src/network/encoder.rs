use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, join, ChannelNorm, Conv2d, Module};
use crate::tensor::{Element, Tensor};

/// `x + conv₂(GELU(norm(conv₁(x))))`, all 3×3 "same" convolutions.
#[derive(Debug, Clone)]
pub struct ResidualUnit<T: Element = f32> {
    pub conv1: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    pub conv2: Conv2d<T>,
}

impl<T: Element> ResidualUnit<T> {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        ResidualUnit {
            conv1: Conv2d::he(c, c, 3, 1, 1, rng),
            norm: ChannelNorm::new(c),
            conv2: Conv2d::he(c, c, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = gelu(&self.norm.forward(&self.conv1.forward(x)?)?);
        x.add(&self.conv2.forward(&h)?)
    }
}

impl<T: Element> Module<T> for ResidualUnit<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}

/// Stride-2 3×3 downsampling followed by residual units.
#[derive(Debug, Clone)]
pub struct EncoderStage<T: Element = f32> {
    pub down: Conv2d<T>,
    pub blocks: Vec<ResidualUnit<T>>,
}

impl<T: Element> EncoderStage<T> {
    pub fn new(cin: usize, cout: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        EncoderStage {
            down: Conv2d::he(cin, cout, 3, 2, 1, rng),
            blocks: (0..blocks).map(|_| ResidualUnit::new(cout, rng)).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 {
            return Err(Error::Geometry(format!(
                "encoder stage needs even spatial extents, got {:?}",
                x.shape()
            )));
        }
        let mut h = self.down.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

impl<T: Element> Module<T> for EncoderStage<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.down.visit_params(&join(prefix, "down"), f);
        self.blocks.visit_params(&join(prefix, "block"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.down.visit_params_mut(&join(prefix, "down"), f);
        self.blocks.visit_params_mut(&join(prefix, "block"), f);
    }
}

/// Four stages, each halving the resolution.
#[derive(Debug, Clone)]
pub struct Encoder<T: Element = f32> {
    pub stages: Vec<EncoderStage<T>>,
}

impl<T: Element> Encoder<T> {
    pub fn new(in_channels: usize, widths: &[usize], blocks: usize, rng: &mut impl Rng) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .map(|&w| {
                let s = EncoderStage::new(cin, w, blocks, rng);
                cin = w;
                s
            })
            .collect();
        Encoder { stages }
    }
}

impl<T: Element> Module<T> for Encoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}
