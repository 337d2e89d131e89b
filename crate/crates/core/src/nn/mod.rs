//! Layers and differentiable functions used by the fusion modules, the
//! encoder and the decoder.

mod activation;
mod conv;
pub mod init;
mod loss;
mod norm;
mod pool;
mod resample;

pub use activation::{activation, gelu, relu, sigmoid, softmax, Activation};
pub use conv::{conv2d, conv_out_extent, Conv2d};
pub use loss::{argmax_classes, cross_entropy, IGNORE_INDEX};
pub use norm::{channel_norm, ChannelNorm};
pub use pool::{adaptive_avg_pool, global_pool, PoolMode};
pub use resample::{bilinear_upsample, resize_bilinear};

use crate::tensor::{Element, Tensor};

/// Anything that owns named parameters.
///
/// Names are dotted paths (`rgb_encoder.stage1.down.weight`); visiting order
/// is stable, which the optimizer state and checkpoints rely on.
pub trait Module<T: Element> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&self) {
        self.visit_params("", &mut |_, t| t.zero_grad());
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(m) = self {
            m.visit_params(prefix, f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(m) = self {
            m.visit_params_mut(prefix, f);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
