//! Finite-difference checks of every differentiable building block, from
//! single layers up to the full network.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{cfm_forward, sfm_forward, CfmParams, FeaturePair, SfmParams, SpatialSoftmax};
use crate::network::{AsaNet, EncoderStage, FusionMode, NetConfig, UperHead};
use crate::nn::{
    activation, adaptive_avg_pool, cross_entropy, global_pool, resize_bilinear, softmax, Activation, ChannelNorm,
    Conv2d, Module, PoolMode, IGNORE_INDEX,
};
use crate::tensor::{GradCheck, GradReport, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradReport,
    pub seconds: f64,
}

impl CaseResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} max_rel {:.2e} (tol {:.0e}) {:.2}s",
            if self.report.passed { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel(),
            self.report.tol,
            self.seconds
        )
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

fn weights(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * phase).sin() + 0.25).collect()
}

/// Re-draws every parameter uniformly from the range `range(name)` returns.
fn redraw<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng, range: impl Fn(&str) -> (f64, f64)) {
    m.visit_params_mut("", &mut |name, t| {
        let (lo, hi) = range(name);
        *t = random(rng, t.shape(), lo, hi);
    });
}

/// Checks `forward` with respect to `extra` inputs and every `stride`-th
/// parameter of `module`.
fn module_check<M: Module<f64> + Clone>(
    check: GradCheck,
    module: &M,
    extra: Vec<Tensor<f64>>,
    stride: usize,
    forward: impl Fn(&M, &[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradReport> {
    let n_extra = extra.len();
    let params = module.named_params();
    let picked: Vec<usize> = (0..params.len()).step_by(stride.max(1)).collect();
    let mut inputs = extra;
    inputs.extend(picked.iter().map(|&i| params[i].1.detach()));
    check.run(
        |t| {
            let mut m = module.clone();
            let (mut k, mut slot) = (0, 0);
            m.visit_params_mut("", &mut |_, p| {
                if picked.get(k) == Some(&slot) {
                    *p = t[n_extra + k].clone();
                    k += 1;
                }
                slot += 1;
            });
            forward(&m, &t[..n_extra])
        },
        &inputs,
    )
}

fn timed(name: &str, f: impl FnOnce() -> Result<GradReport>) -> Result<CaseResult> {
    let start = Instant::now();
    let report = f()?;
    Ok(CaseResult {
        name: name.to_string(),
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn tiny_net(mode: FusionMode) -> NetConfig {
    // a channel norm over two channels maps every pixel to about ±1 and
    // leaves only eps-sized gradients, so the narrowest stage has three
    NetConfig {
        widths: vec![3, 3, 4, 4],
        blocks: 1,
        num_classes: 2,
        height: 16,
        width: 16,
        decoder_width: 3,
        fusion: mode,
        ..NetConfig::default()
    }
}

fn layer_cases(out: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let exact = GradCheck::default();
    for (name, cin, cout, k, stride, pad) in [
        ("conv2d 3x3", 2, 3, 3, 1, 1),
        ("conv2d 3x3 stride 2", 2, 3, 3, 2, 1),
        ("conv2d 1x1", 3, 2, 1, 1, 0),
        ("conv2d 7x7 single output", 2, 1, 7, 1, 3),
    ] {
        let mut conv = Conv2d::<f64>::zeros(cin, cout, k, stride, pad);
        redraw(&mut conv, &mut rng, |_| (-1.0, 1.0));
        let x = random(&mut rng, &[2, cin, 6, 6], -1.0, 1.0);
        let side = (6 + 2 * pad - k) / stride + 1;
        let w = weights(2 * cout * side * side, 0.37);
        out.push(timed(name, || {
            module_check(exact, &conv, vec![x], 1, |m, t| m.forward(&t[0])?.weighted_sum(&w[..]))
        })?);
    }

    let mut norm = ChannelNorm::<f64>::new(3);
    redraw(&mut norm, &mut rng, |n| if n.ends_with("scale") { (0.5, 1.5) } else { (-0.3, 0.3) });
    let x = random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let w = weights(96, 0.53);
    out.push(timed("channel norm", || {
        module_check(exact, &norm, vec![x], 1, |m, t| m.forward(&t[0])?.weighted_sum(&w))
    })?);

    let x = random(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    for (name, kind) in [
        ("gelu", Activation::Gelu),
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
    ] {
        let w = weights(96, 0.71);
        out.push(timed(name, || exact.run(|t| activation(&t[0], kind).weighted_sum(&w), std::slice::from_ref(&x)))?);
    }
    for axis in [1, 2] {
        let w = weights(96, 0.43);
        out.push(timed(&format!("softmax axis {axis}"), || {
            exact.run(|t| softmax(&t[0], axis)?.weighted_sum(&w), std::slice::from_ref(&x))
        })?);
    }
    for (name, mode) in [("global max pool", PoolMode::Max), ("global avg pool", PoolMode::Avg)] {
        let w = weights(6, 0.9);
        out.push(timed(name, || exact.run(|t| global_pool(&t[0], mode)?.weighted_sum(&w), std::slice::from_ref(&x)))?);
    }
    let x6 = random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    for bins in [1, 2, 3, 6] {
        let w = weights(2 * bins * bins, 0.6);
        out.push(timed(&format!("adaptive avg pool {bins}"), || {
            exact.run(|t| adaptive_avg_pool(&t[0], bins, bins)?.weighted_sum(&w), std::slice::from_ref(&x6))
        })?);
    }
    for (oh, ow) in [(12, 9), (3, 4)] {
        let w = weights(2 * oh * ow, 0.33);
        out.push(timed(&format!("bilinear resize {oh}x{ow}"), || {
            exact.run(|t| resize_bilinear(&t[0], oh, ow)?.weighted_sum(&w), std::slice::from_ref(&x6))
        })?);
    }
    let logits = random(&mut rng, &[2, 3, 2, 2], -2.0, 2.0);
    let labels = [0, 2, IGNORE_INDEX, 1, 1, 1, 0, 2];
    out.push(timed("cross entropy", || {
        exact.run(|t| cross_entropy(&t[0], &labels, IGNORE_INDEX), &[logits])
    })?);
    Ok(())
}

fn fusion_cases(out: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let exact = GradCheck::default();
    let shape = [1, 2, 4, 4];
    let (r, s) = (random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0));
    let w = weights(32, 0.77);

    // gates kept unsaturated and hidden units away from GELU's zero so no
    // gradient coordinate sits at round-off level
    let mut sfm = SfmParams::<f64>::zeros(2);
    redraw(&mut sfm, &mut rng, |name| match name.split_once('.').map(|(_, rest)| rest) {
        Some("reduce.weight") => (-1.0, 1.0),
        Some("reduce.bias") => (0.5, 1.5),
        Some("expand.weight") => (-0.15, 0.15),
        _ => (-0.3, 0.3),
    });
    out.push(timed("sfm", || {
        module_check(exact, &sfm, vec![r.clone(), s.clone()], 1, |m, t| {
            let o = sfm_forward(&FeaturePair::new(t[0].clone(), t[1].clone())?, m)?;
            o.rgb.weighted_sum(&w)?.add(&o.sar.weighted_sum(&w)?)
        })
    })?);

    for mode in [SpatialSoftmax::Modality, SpatialSoftmax::Spatial] {
        // the default initialisation scaled up so the 7x7 score convolutions
        // carry gradients well above finite-difference noise
        let mut cfm = CfmParams::<f64>::new(2, mode, &mut rng);
        cfm.visit_params_mut("", &mut |_, t| {
            *t = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * 20.0).collect()).expect("same shape");
        });
        // a shared offset of the score maps cancels in the spatial softmax,
        // so their biases have an exactly zero gradient and are left out
        let skip_scores = mode == SpatialSoftmax::Spatial;
        let name = format!("cfm {}", if skip_scores { "spatial" } else { "modality" });
        let params = cfm.named_params();
        let picked: Vec<usize> = (0..params.len())
            .filter(|&i| !(skip_scores && params[i].0.starts_with("score_") && params[i].0.ends_with("bias")))
            .collect();
        let mut inputs = vec![r.clone(), s.clone()];
        inputs.extend(picked.iter().map(|&i| params[i].1.detach()));
        out.push(timed(&name, || {
            exact.run(
                |t| {
                    let mut m = cfm.clone();
                    let (mut k, mut slot) = (0, 0);
                    m.visit_params_mut("", &mut |_, p| {
                        if picked.get(k) == Some(&slot) {
                            *p = t[2 + k].clone();
                            k += 1;
                        }
                        slot += 1;
                    });
                    cfm_forward(&FeaturePair::new(t[0].clone(), t[1].clone())?, &m)?.weighted_sum(&w)
                },
                &inputs,
            )
        })?);
    }
    Ok(())
}

fn network_cases(out: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let sampled = GradCheck {
        max_coords: Some(6),
        ..GradCheck::default()
    };

    let mut stage = EncoderStage::<f64>::new(2, 3, 1, &mut rng);
    redraw(&mut stage, &mut rng, |n| if n.ends_with("norm.scale") { (0.5, 1.5) } else { (-0.6, 0.6) });
    let x = random(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
    let w = weights(48, 0.41);
    out.push(timed("encoder stage", || {
        module_check(sampled, &stage, vec![x], 1, |m, t| m.forward(&t[0])?.weighted_sum(&w))
    })?);

    let widths = [2, 3, 3, 4];
    let head = UperHead::<f64>::new(&widths, 3, 2, 2, &mut rng);
    let feats: Vec<Tensor<f64>> = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| random(&mut rng, &[1, c, 8 >> i, 8 >> i], -1.0, 1.0))
        .collect();
    // zero-mean weights keep the loss small, so its round-off stays below
    // the smallest sampled gradients
    let w: Vec<f64> = (0..2 * 256).map(|i| (i as f64 * 0.29).sin()).collect();
    out.push(timed("decoder", || {
        module_check(sampled, &head, feats, 3, |m, t| m.forward(t)?.weighted_sum(&w))
    })?);

    let cfg = tiny_net(FusionMode::SfmCfm);
    let mut net = AsaNet::<f64>::new(&cfg, 13)?;
    // the fusion attention weights are scaled up as in the standalone case
    net.visit_params_mut("", &mut |name, t| {
        if name.starts_with("cfm") {
            *t = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * 20.0).collect()).expect("same shape");
        }
    });
    let r = random(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let s = random(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    out.push(timed("network sfm+cfm 64-bit", || {
        module_check(sampled, &net, vec![r.clone(), s.clone()], 7, |m, t| m.forward(&t[0], &t[1])?.weighted_sum(&w))
    })?);

    out.push(timed("network sfm+cfm 32-bit", || full_model_f32(&net, &r, &s, &w))?);
    Ok(())
}

/// Gradients of a 32-bit copy of `net` against 64-bit central differences.
fn full_model_f32(net: &AsaNet<f64>, r: &Tensor<f64>, s: &Tensor<f64>, w: &[f64]) -> Result<GradReport> {
    let check = GradCheck {
        tol: 1e-2,
        max_coords: Some(6),
        ..GradCheck::default()
    };
    let params = net.named_params();
    let picked: Vec<usize> = (0..params.len()).step_by(7).collect();
    let mut net32 = AsaNet::<f32>::new(net.config(), 0)?;
    let map: HashMap<String, Tensor<f32>> = params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    net32.load_params(&map)?;
    let (r32, s32) = (r.cast::<f32>().with_grad(), s.cast::<f32>().with_grad());
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    net32.forward(&r32, &s32)?.weighted_sum(&w32)?.backward()?;
    let grads32 = net32.named_params();
    let widen = |g: Option<Vec<f32>>, n: usize| g.map_or(vec![0.0; n], |g| g.iter().map(|&v| f64::from(v)).collect());
    let mut analytic = vec![widen(r32.grad(), r32.numel()), widen(s32.grad(), s32.numel())];
    analytic.extend(picked.iter().map(|&i| widen(grads32[i].1.grad(), grads32[i].1.numel())));
    let mut inputs = vec![r.clone(), s.clone()];
    inputs.extend(picked.iter().map(|&i| params[i].1.detach()));
    check.compare(
        &analytic,
        |t| {
            let mut m = net.clone();
            let (mut k, mut slot) = (0, 0);
            m.visit_params_mut("", &mut |_, p| {
                if picked.get(k) == Some(&slot) {
                    *p = t[2 + k].clone();
                    k += 1;
                }
                slot += 1;
            });
            m.forward(&t[0], &t[1])?.weighted_sum(w)
        },
        &inputs,
    )
}

/// Runs every check; the first error aborts, failed tolerances do not.
pub fn run_suite() -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    layer_cases(&mut out)?;
    fusion_cases(&mut out)?;
    network_cases(&mut out)?;
    Ok(out)
}
