use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{NetConfig, NUM_STAGES, RGB_CHANNELS, SAR_CHANNELS};
use super::decoder::UperHead;
use super::encoder::Encoder;
use crate::error::{Error, Result};
use crate::flops;
use crate::fusion::{cfm_forward, pwa, sfm_forward, CfmParams, FeaturePair, SfmParams};
use crate::nn::{join, Module};
use crate::tensor::{no_grad, Element, Tensor};

/// Dual-branch segmentation network with per-stage fusion.
#[derive(Debug, Clone)]
pub struct AsaNet<T: Element = f32> {
    cfg: NetConfig,
    pub rgb_encoder: Option<Encoder<T>>,
    pub sar_encoder: Option<Encoder<T>>,
    /// Indexed by stage − 1; `None` where the stage is inactive.
    pub sfm: Vec<Option<SfmParams<T>>>,
    pub cfm: Vec<Option<CfmParams<T>>>,
    pub decoder: UperHead<T>,
}

/// Intermediate maps of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Element = f32> {
    pub logits: Tensor<T>,
    /// Map handed to the decoder at each stage.
    pub fused: Vec<Tensor<T>>,
}

impl<T: Element> AsaNet<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &cfg.widths;
        // both encoders are always drawn so a mode change does not shift
        // the initial weights of the other parts
        let rgb = Encoder::new(RGB_CHANNELS, w, cfg.blocks, &mut rng);
        let sar = Encoder::new(SAR_CHANNELS, w, cfg.blocks, &mut rng);
        let mut sfm = Vec::with_capacity(NUM_STAGES);
        let mut cfm = Vec::with_capacity(NUM_STAGES);
        for (i, &c) in w.iter().enumerate() {
            let s = SfmParams::new(c, &mut rng);
            let f = CfmParams::new(c, cfg.softmax, &mut rng);
            let active = cfg.stage_active(i + 1);
            sfm.push((active && cfg.fusion.uses_sfm()).then_some(s));
            cfm.push((active && cfg.fusion.uses_cfm()).then_some(f));
        }
        let decoder = UperHead::new(w, cfg.decoder_width, cfg.num_classes, 2, &mut rng);
        Ok(AsaNet {
            cfg: cfg.clone(),
            rgb_encoder: cfg.fusion.uses_rgb().then_some(rgb),
            sar_encoder: cfg.fusion.uses_sar().then_some(sar),
            sfm,
            cfm,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// `rgb: N×3×H×W`, `sar: N×1×H×W` in [0, 1]; returns `N×K×H×W` logits.
    pub fn forward(&self, rgb: &Tensor<T>, sar: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(rgb, sar)?.logits)
    }

    pub fn forward_trace(&self, rgb: &Tensor<T>, sar: &Tensor<T>) -> Result<ForwardTrace<T>> {
        self.check_inputs(rgb, sar)?;
        let mut x_rgb = rgb.clone();
        let mut x_sar = sar.clone();
        let mut fused = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let f_rgb = match &self.rgb_encoder {
                Some(e) => Some(e.stages[i].forward(&x_rgb)?),
                None => None,
            };
            let f_sar = match &self.sar_encoder {
                Some(e) => Some(e.stages[i].forward(&x_sar)?),
                None => None,
            };
            let (f_rgb, f_sar) = match (f_rgb, f_sar) {
                (Some(r), Some(s)) => (r, s),
                (Some(r), None) => {
                    fused.push(r.clone());
                    x_rgb = r;
                    continue;
                }
                (None, Some(s)) => {
                    fused.push(s.clone());
                    x_sar = s;
                    continue;
                }
                (None, None) => unreachable!("at least one branch exists"),
            };
            let mut pair = FeaturePair::new(f_rgb, f_sar)?;
            if let Some(p) = &self.sfm[i] {
                let g = sfm_forward(&pair, p)?;
                pair = if self.cfg.sfm_residual {
                    FeaturePair::new(pair.rgb.add(&g.rgb)?, pair.sar.add(&g.sar)?)?
                } else {
                    g
                };
            }
            fused.push(match &self.cfm[i] {
                Some(p) => cfm_forward(&pair, p)?,
                None => pwa(&pair.rgb, &pair.sar)?,
            });
            x_rgb = pair.rgb;
            x_sar = pair.sar;
        }
        let logits = self.decoder.forward(&fused)?;
        Ok(ForwardTrace { logits, fused })
    }

    fn check_inputs(&self, rgb: &Tensor<T>, sar: &Tensor<T>) -> Result<()> {
        let expect_rgb = [rgb.shape().first().copied().unwrap_or(0), RGB_CHANNELS, self.cfg.height, self.cfg.width];
        if rgb.shape() != expect_rgb {
            return Err(Error::dims("asanet rgb input", rgb.shape(), &expect_rgb));
        }
        let expect_sar = [expect_rgb[0], SAR_CHANNELS, self.cfg.height, self.cfg.width];
        if sar.shape() != expect_sar {
            return Err(Error::dims("asanet sar input", sar.shape(), &expect_sar));
        }
        Ok(())
    }

    /// Replaces every parameter by the tensor of the same name. Missing
    /// names, unknown names and shape changes are reported.
    pub fn load_params(&mut self, params: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut first_err: Option<Error> = None;
        let mut used = HashSet::new();
        self.visit_params_mut("", &mut |name, slot| {
            if first_err.is_some() {
                return;
            }
            match params.get(name) {
                None => first_err = Some(Error::Registry(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != slot.shape() => {
                    first_err = Some(Error::Registry(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                Some(t) => {
                    used.insert(name.to_string());
                    *slot = t.detach().with_grad();
                }
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        let mut extra: Vec<&String> = params.keys().filter(|k| !used.contains(*k)).collect();
        extra.sort();
        if let Some(name) = extra.first() {
            return Err(Error::Registry(format!("unexpected parameter `{name}`")));
        }
        Ok(())
    }

    /// Analytic operation count of a batch-1 forward and the parameter count.
    pub fn complexity(&self) -> Result<Complexity> {
        let rgb = Tensor::<T>::zeros(&[1, RGB_CHANNELS, self.cfg.height, self.cfg.width]);
        let sar = Tensor::<T>::zeros(&[1, SAR_CHANNELS, self.cfg.height, self.cfg.width]);
        complexity_of(self, |m| no_grad(|| m.forward(&rgb, &sar)))
    }
}

impl<T: Element> Module<T> for AsaNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.rgb_encoder.visit_params(&join(prefix, "rgb_encoder"), f);
        self.sar_encoder.visit_params(&join(prefix, "sar_encoder"), f);
        for (i, s) in self.sfm.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("sfm{}", i + 1)), f);
        }
        for (i, c) in self.cfm.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("cfm{}", i + 1)), f);
        }
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.rgb_encoder.visit_params_mut(&join(prefix, "rgb_encoder"), f);
        self.sar_encoder.visit_params_mut(&join(prefix, "sar_encoder"), f);
        for (i, s) in self.sfm.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("sfm{}", i + 1)), f);
        }
        for (i, c) in self.cfm.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &format!("cfm{}", i + 1)), f);
        }
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub flops: u64,
    pub params: usize,
}

/// Counts the operations `forward` issues and the parameters `module` owns.
pub fn complexity_of<T: Element, M: Module<T>>(
    module: &M,
    forward: impl FnOnce(&M) -> Result<Tensor<T>>,
) -> Result<Complexity> {
    let (out, flops) = flops::count(|| forward(module));
    out?;
    Ok(Complexity {
        flops,
        params: module.num_params(),
    })
}

/// Complexity of the network described by `cfg`.
pub fn count_flops_params(cfg: &NetConfig) -> Result<Complexity> {
    AsaNet::<f32>::new(cfg, 0)?.complexity()
}
