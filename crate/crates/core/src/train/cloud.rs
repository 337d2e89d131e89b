use super::confusion;
use crate::data::{generate_scene, SceneSample, SceneSpec, Split};
use crate::error::{Error, Result};
use crate::network::AsaNet;

/// Validation scenes of `spec` (odd indices below `count`) re-rendered with
/// the given cloud coverage. Labels and SAR do not depend on the coverage.
pub fn cloudy_split(spec: &SceneSpec, count: u64, coverage: f64) -> Result<Vec<SceneSample>> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::Config(format!("coverage must lie in [0, 1], got {coverage}")));
    }
    let spec = SceneSpec {
        cloud_coverage: coverage,
        ..spec.clone()
    };
    Ok((0..count)
        .filter(|&i| Split::of(i) == Split::Val)
        .map(|i| generate_scene(&spec, i))
        .collect())
}

/// A trained model entered into the cloud benchmark.
pub struct Entry<'a> {
    pub label: String,
    pub seed: u64,
    pub model: &'a AsaNet<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudRow {
    pub label: String,
    pub seed: u64,
    /// mIoU per coverage, in table order.
    pub miou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudTable {
    pub coverages: Vec<f64>,
    pub rows: Vec<CloudRow>,
}

impl CloudTable {
    /// Median mIoU of `label` over seeds at coverage column `col`.
    pub fn median(&self, label: &str, col: usize) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.label == label).map(|r| r.miou[col]).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn column(&self, coverage: f64) -> Option<usize> {
        self.coverages.iter().position(|&c| (c - coverage).abs() < 1e-12)
    }

    fn labels(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label.as_str()) {
                out.push(&r.label);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed");
        for c in &self.coverages {
            out.push_str(&format!(",miou_at_{c}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.label, r.seed));
            for m in &r.miou {
                out.push_str(&format!(",{:.4}", 100.0 * m));
            }
            out.push('\n');
        }
        out
    }

    /// Median mIoU (points) per model and coverage.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "coverage");
        for c in &self.coverages {
            out.push_str(&format!(" {c:>8.2}"));
        }
        out.push('\n');
        for label in self.labels() {
            out.push_str(&format!("{label:<12}"));
            for col in 0..self.coverages.len() {
                let m = self.median(label, col).expect("label present");
                out.push_str(&format!(" {:>8.2}", 100.0 * m));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates each model on the validation split re-rendered at every
/// coverage level.
pub fn cloud_robustness(entries: &[Entry<'_>], spec: &SceneSpec, count: u64, coverages: &[f64]) -> Result<CloudTable> {
    let mut rows: Vec<CloudRow> = entries
        .iter()
        .map(|e| CloudRow {
            label: e.label.clone(),
            seed: e.seed,
            miou: Vec::with_capacity(coverages.len()),
        })
        .collect();
    for &c in coverages {
        let val = cloudy_split(spec, count, c)?;
        for (row, e) in rows.iter_mut().zip(entries) {
            row.miou.push(confusion(e.model, &val)?.summary()?.miou);
        }
    }
    Ok(CloudTable {
        coverages: coverages.to_vec(),
        rows,
    })
}
