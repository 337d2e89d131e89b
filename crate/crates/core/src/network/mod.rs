//! Dual-branch encoder, per-stage fusion and the segmentation decoder.

mod config;
mod decoder;
mod encoder;
mod model;

pub use config::{FusionMode, NetConfig, NUM_STAGES, RGB_CHANNELS, SAR_CHANNELS};
pub use decoder::{ConvNormAct, UperHead, PPM_BINS};
pub use encoder::{Encoder, EncoderStage, ResidualUnit};
pub use model::{complexity_of, count_flops_params, AsaNet, Complexity, ForwardTrace};
