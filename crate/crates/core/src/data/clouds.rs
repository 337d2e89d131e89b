use super::splitmix64;

pub const DEFAULT_TURBULENCE: f64 = 1.5;
pub const DEFAULT_OPACITY: f64 = 1.0;

const OCTAVES: u32 = 5;
/// Half-width of the soft edge, in units of the noise field's range.
const EDGE: f64 = 0.04;

fn lattice(seed: u64, octave: u32, x: i64, y: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(((octave as u64) << 48) ^ ((x as u64) << 24) ^ (y as u64 & 0xFF_FFFF)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise. Octave `o` has lattice spacing `size / 2^(o+1)`
/// and amplitude `persistence^o` with `persistence = t / (1 + t)`, so
/// higher turbulence gives rougher fields.
fn noise_field(h: usize, w: usize, seed: u64, turbulence: f64) -> Vec<f64> {
    let persistence = turbulence / (1.0 + turbulence);
    let mut field = vec![0.0; h * w];
    let base = h.max(w).max(2) as f64 / 2.0;
    let mut amp = 1.0;
    for o in 0..OCTAVES {
        let cell = (base / f64::from(1u32 << o)).max(1.0);
        for y in 0..h {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as i64, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as i64, smooth(fx.fract()));
                let a = lattice(seed, o, x0, y0);
                let b = lattice(seed, o, x0 + 1, y0);
                let c = lattice(seed, o, x0, y0 + 1);
                let d = lattice(seed, o, x0 + 1, y0 + 1);
                let top = a + (b - a) * tx;
                let bottom = c + (d - c) * tx;
                field[y * w + x] += amp * (top + (bottom - top) * ty);
            }
        }
        amp *= persistence;
    }
    field
}

/// Soft cloud mask in [0, 1]. The noise field is thresholded at its own
/// `(1 − coverage)` quantile, so the fraction of pixels with `m > 0.5` is
/// `coverage` up to ties; masks for the same seed are nested in coverage.
pub fn cloud_mask(h: usize, w: usize, seed: u64, coverage: f64, turbulence: f64) -> Vec<f64> {
    let n = h * w;
    if coverage <= 0.0 || n == 0 {
        return vec![0.0; n];
    }
    if coverage >= 1.0 {
        return vec![1.0; n];
    }
    let field = noise_field(h, w, seed, turbulence);
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = ((1.0 - coverage) * n as f64).round() as usize;
    let threshold = if cut == 0 {
        sorted[0] - 1.0
    } else if cut >= n {
        sorted[n - 1] + 1.0
    } else {
        0.5 * (sorted[cut - 1] + sorted[cut])
    };
    let edge = EDGE * (sorted[n - 1] - sorted[0]).max(f64::MIN_POSITIVE);
    field
        .iter()
        .map(|&v| {
            let t = ((v - threshold) / edge * 0.5 + 0.5).clamp(0.0, 1.0);
            smooth(t)
        })
        .collect()
}

/// Blends a channel-planar RGB raster toward white under the cloud mask:
/// `(1 − m·opacity)·rgb + m·opacity·255`.
pub fn simulate_clouds(
    rgb: &[u8],
    h: usize,
    w: usize,
    seed: u64,
    coverage: f64,
    turbulence: f64,
    opacity: f64,
) -> Vec<u8> {
    if coverage <= 0.0 || opacity <= 0.0 {
        return rgb.to_vec();
    }
    let mask = cloud_mask(h, w, seed, coverage, turbulence);
    rgb.chunks(h * w)
        .flat_map(|plane| {
            plane.iter().zip(&mask).map(|(&v, &m)| {
                let a = m * opacity;
                ((1.0 - a) * f64::from(v) + a * 255.0 + 0.5).floor().min(255.0) as u8
            })
        })
        .collect()
}
