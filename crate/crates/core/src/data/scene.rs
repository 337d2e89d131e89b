use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

use super::{mix_seed, sar_stretch, simulate_clouds, splitmix64, SceneSample, SceneSpec};

const CLOUD_SALT: u64 = 0xC10D_5EED;

/// Paints ellipses and rectangles in z-order over a class-0 background.
/// Each shape's class is drawn in proportion to how far that class is
/// below its area prior, and sized to roughly close the gap.
fn paint_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = spec.size;
    let n = (s * s) as f64;
    let k = spec.num_classes();
    let mut label = vec![0u8; s * s];
    let mut counts = vec![0usize; k];
    counts[0] = s * s;
    let shapes = rng.random_range(spec.shapes[0]..=spec.shapes[1]);
    for _ in 0..shapes {
        let deficits: Vec<f64> = (1..k)
            .map(|c| (spec.area_priors[c] - counts[c] as f64 / n).max(0.0))
            .collect();
        let total: f64 = deficits.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut class = k - 1;
        for (i, d) in deficits.iter().enumerate() {
            if pick < *d {
                class = i + 1;
                break;
            }
            pick -= d;
        }
        let area = (deficits[class - 1] * n * rng.random_range(0.9..1.6)).max(4.0);
        let aspect: f64 = rng.random_range(0.5..2.0);
        let cy = rng.random_range(0.0..s as f64);
        let cx = rng.random_range(0.0..s as f64);
        let ellipse = rng.random_bool(0.5);
        let (ry, rx) = if ellipse {
            let r = (area / std::f64::consts::PI).sqrt();
            (r * aspect.sqrt(), r / aspect.sqrt())
        } else {
            let r = area.sqrt() / 2.0;
            (r * aspect.sqrt(), r / aspect.sqrt())
        };
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(s);
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(s);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let inside = if ellipse { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    let old = &mut label[y * s + x];
                    counts[*old as usize] -= 1;
                    counts[class] += 1;
                    *old = class as u8;
                }
            }
        }
    }
    label
}

fn render(spec: &SceneSpec, index: u64, coverage: Option<f64>) -> SceneSample {
    let seed = mix_seed(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.size;
    let label = paint_labels(spec, &mut rng);

    let mut rgb = vec![0u8; 3 * s * s];
    for (c, plane) in rgb.chunks_mut(s * s).enumerate() {
        for (v, &l) in plane.iter_mut().zip(&label) {
            let o = &spec.optics[l as usize];
            let noise = Normal::new(0.0, o.texture.max(0.0)).expect("finite std").sample(&mut rng);
            *v = (o.color[c] + noise).round().clamp(0.0, 255.0) as u8;
        }
    }

    let raw: Vec<f64> = label
        .iter()
        .map(|&l| {
            let b = &spec.backscatter[l as usize];
            let speckle: f64 = (0..b.looks).map(|_| -> f64 { Exp1.sample(&mut rng) }).sum::<f64>() / f64::from(b.looks);
            b.mean * speckle
        })
        .collect();
    let sar = sar_stretch(&raw, spec.sar_lo_pct, spec.sar_hi_pct);

    let coverage = coverage.unwrap_or(spec.cloud_coverage);
    let rgb = simulate_clouds(&rgb, s, s, splitmix64(seed ^ CLOUD_SALT), coverage, spec.turbulence, spec.opacity);
    SceneSample {
        height: s,
        width: s,
        num_classes: spec.num_classes(),
        rgb,
        sar,
        label,
    }
}

/// Scene `index` of `spec`, with the spec's cloud coverage. The cloud field
/// depends only on `(spec.seed, index)`, so changing the coverage leaves
/// labels, SAR and the cloud-free optical content untouched.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> SceneSample {
    render(spec, index, None)
}

/// Scene `index` rendered without clouds.
pub fn generate_scene_clear(spec: &SceneSpec, index: u64) -> SceneSample {
    render(spec, index, Some(0.0))
}

/// Pixel share of each class over scenes `0..scenes`.
pub fn class_frequencies(spec: &SceneSpec, scenes: u64) -> Vec<f64> {
    let mut counts = vec![0u64; spec.num_classes()];
    let mut total = 0u64;
    for i in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i));
        for l in paint_labels(spec, &mut rng) {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}
