/// Percentile with linear interpolation between closest ranks.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clips `raw` to its `[lo_pct, hi_pct]` percentile values and maps that
/// span affinely onto 0–255 (round half up). A zero span yields all zeros.
pub fn sar_stretch(raw: &[f64], lo_pct: f64, hi_pct: f64) -> Vec<u8> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mut sorted = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, lo_pct);
    let hi = percentile(&sorted, hi_pct);
    if !(hi > lo) {
        return vec![0; raw.len()];
    }
    let scale = 255.0 / (hi - lo);
    raw.iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) * scale + 0.5).floor().min(255.0) as u8)
        .collect()
}
