use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{train_on, Checkpoint, LogRow, TrainConfig};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::network::{FusionMode, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Modules,
    Stages,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Modules => "modules",
            Suite::Stages => "stages",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(Suite::Modules),
            "stages" => Ok(Suite::Stages),
            other => Err(Error::Config(format!("unknown suite `{other}` (expected modules or stages)"))),
        }
    }
}

/// One row of an ablation table: a label and the network it trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub net: NetConfig,
}

/// Row order of the module ablation.
pub const MODULE_ROWS: [FusionMode; 6] = [
    FusionMode::RgbOnly,
    FusionMode::SarOnly,
    FusionMode::PwaOnly,
    FusionMode::CfmOnly,
    FusionMode::SfmPwa,
    FusionMode::SfmCfm,
];

/// Stage masks of the stage ablation.
pub const STAGE_MASKS: [&[usize]; 6] = [&[], &[1], &[2], &[3], &[4], &[1, 2, 3, 4]];

pub fn stage_label(mask: &[usize]) -> String {
    let inner: Vec<String> = mask.iter().map(usize::to_string).collect();
    format!("{{{}}}", inner.join(","))
}

impl Suite {
    pub fn variants(self, base: &NetConfig) -> Vec<Variant> {
        match self {
            Suite::Modules => MODULE_ROWS
                .iter()
                .map(|&m| Variant {
                    label: m.name().to_string(),
                    net: NetConfig {
                        stages: vec![1, 2, 3, 4],
                        ..base.with_mode(m)
                    },
                })
                .collect(),
            // an empty mask is the all-PWA baseline
            Suite::Stages => STAGE_MASKS
                .iter()
                .map(|mask| Variant {
                    label: stage_label(mask),
                    net: if mask.is_empty() {
                        NetConfig {
                            stages: vec![1, 2, 3, 4],
                            ..base.with_mode(FusionMode::PwaOnly)
                        }
                    } else {
                        NetConfig {
                            stages: mask.to_vec(),
                            ..base.with_mode(FusionMode::SfmCfm)
                        }
                    },
                })
                .collect(),
        }
    }

    /// Label of the row the deltas are measured against.
    pub fn baseline(self) -> String {
        match self {
            Suite::Modules => FusionMode::PwaOnly.name().to_string(),
            Suite::Stages => stage_label(&[]),
        }
    }
}

/// Validation metrics of one (variant, seed) training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub summary: Summary,
    pub checkpoint: Checkpoint,
}

/// Trains and evaluates one variant; the reported metrics are those of the
/// best validation checkpoint.
pub fn run_variant(
    base: &TrainConfig,
    variant: &Variant,
    seed: u64,
    train: &[SceneSample],
    val: &[SceneSample],
    progress: &mut dyn FnMut(&LogRow),
) -> Result<RunResult> {
    let cfg = TrainConfig {
        seed,
        net: variant.net.clone(),
        ..base.clone()
    };
    let out = train_on(&cfg, train, val, progress)?;
    let model = out.best.to_model::<f32>()?;
    let summary = super::confusion(&model, val)?.summary()?;
    Ok(RunResult {
        label: variant.label.clone(),
        seed,
        summary,
        checkpoint: out.best,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-variant medians over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMedian {
    pub label: String,
    pub kappa: f64,
    pub oa: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub title: String,
    pub baseline: String,
    /// Row labels in display order.
    pub labels: Vec<String>,
    pub runs: Vec<RunResult>,
    pub num_classes: usize,
}

impl AblationReport {
    pub fn runs_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }

    pub fn median(&self, label: &str) -> Option<RowMedian> {
        let runs: Vec<&RunResult> = self.runs_for(label).collect();
        if runs.is_empty() {
            return None;
        }
        let med = |f: &dyn Fn(&Summary) -> f64| median(&mut runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>());
        let iou = (0..self.num_classes)
            .map(|k| {
                let mut v: Vec<f64> = runs.iter().filter_map(|r| r.summary.iou.get(k).copied().flatten()).collect();
                (!v.is_empty()).then(|| median(&mut v))
            })
            .collect();
        Some(RowMedian {
            label: label.to_string(),
            kappa: med(&|s| s.kappa),
            oa: med(&|s| s.oa),
            miou: med(&|s| s.miou),
            iou,
        })
    }

    /// One CSV row per run: `model,seed,miou,oa,kappa,iou_0..`.
    pub fn to_csv(&self) -> String {
        let mut out = Summary::csv_header(self.num_classes);
        out.push('\n');
        for label in &self.labels {
            for r in self.runs_for(label) {
                out.push_str(&r.summary.csv_row(&r.label, r.seed));
                out.push('\n');
            }
        }
        out
    }

    /// Median table in points with mIoU deltas against the baseline row,
    /// e.g. `71.20 (+0.26)`.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let seeds = self.runs_for(&self.baseline).count();
        let mut out = format!("{} (median over {seeds} seed(s); delta vs {})\n", self.title, self.baseline);
        let mut header = format!("{:<12} {:>7} {:>7} {:>16}", "model", "kappa", "oa", "miou");
        for k in 0..self.num_classes {
            let name = class_names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
            header.push_str(&format!(" {name:>10}"));
        }
        out.push_str(&header);
        out.push('\n');
        let base = self.median(&self.baseline).map(|m| m.miou);
        for label in &self.labels {
            let Some(m) = self.median(label) else { continue };
            let miou = match base {
                Some(b) if label != &self.baseline => format!("{:.2} ({})", 100.0 * m.miou, format_delta(100.0 * (m.miou - b))),
                _ => format!("{:.2}", 100.0 * m.miou),
            };
            let mut line = format!("{:<12} {:>7.2} {:>7.2} {:>16}", label, 100.0 * m.kappa, 100.0 * m.oa, miou);
            for v in &m.iou {
                match v {
                    Some(v) => line.push_str(&format!(" {:>10.2}", 100.0 * v)),
                    None => line.push_str(&format!(" {:>10}", "-")),
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// `+0.26` / `-0.43` style signed delta.
pub fn format_delta(points: f64) -> String {
    let rounded = (points * 100.0).round() / 100.0;
    if rounded < 0.0 {
        format!("{rounded:.2}")
    } else {
        format!("+{:.2}", rounded.abs())
    }
}

/// Receives `(variant label, seed, row)` from concurrently running jobs.
pub type Progress<'a> = dyn Fn(&str, u64, &LogRow) + Sync + 'a;

/// Trains every variant of `suite` for every seed.
pub fn ablate(
    suite: Suite,
    base: &TrainConfig,
    seeds: &[u64],
    train: &[SceneSample],
    val: &[SceneSample],
    progress: &Progress<'_>,
) -> Result<AblationReport> {
    run_suite(suite, &suite.variants(&base.net), base, seeds, train, val, progress)
}

/// Like [`ablate`] but over an explicit list of variants. Independent
/// (variant, seed) runs are spread over the available cores; each run is
/// itself sequential, so results do not depend on the core count.
pub fn run_suite(
    suite: Suite,
    variants: &[Variant],
    base: &TrainConfig,
    seeds: &[u64],
    train: &[SceneSample],
    val: &[SceneSample],
    progress: &Progress<'_>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let jobs: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, seed)) = jobs.get(i) else { break };
                let r = run_variant(base, v, seed, train, val, &mut |row| progress(&v.label, seed, row));
                let failed = r.is_err();
                slots.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
                if failed {
                    next.store(jobs.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for slot in slots.into_inner().expect("workers joined") {
        match slot {
            Some(r) => runs.push(r?),
            None => continue,
        }
    }
    Ok(AblationReport {
        title: format!("{suite} ablation"),
        baseline: suite.baseline(),
        labels: variants.iter().map(|v| v.label.clone()).collect(),
        runs,
        num_classes: base.net.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::metrics::ConfusionMatrix;

    fn summary(miou_diag: u64) -> Summary {
        ConfusionMatrix::from_counts(2, vec![miou_diag, 10, 10, miou_diag]).unwrap().summary().unwrap()
    }

    fn fake_run(label: &str, seed: u64, diag: u64) -> RunResult {
        RunResult {
            label: label.into(),
            seed,
            summary: summary(diag),
            checkpoint: Checkpoint {
                iteration: 0,
                best_miou: 0.0,
                tensors: vec![],
                config: TrainConfig::default(),
            },
        }
    }

    #[test]
    fn module_suite_has_six_rows_in_order() {
        let v = Suite::Modules.variants(&NetConfig::default());
        let labels: Vec<&str> = v.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["rgb-only", "sar-only", "pwa-only", "cfm-only", "sfm+pwa", "sfm+cfm"]);
        assert_eq!(Suite::Modules.baseline(), "pwa-only");
    }

    #[test]
    fn stage_suite_masks() {
        let v = Suite::Stages.variants(&NetConfig::default());
        let labels: Vec<&str> = v.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["{}", "{1}", "{2}", "{3}", "{4}", "{1,2,3,4}"]);
        assert_eq!(v[0].net, NetConfig::default().with_mode(FusionMode::PwaOnly));
        assert_eq!(v[4].net.stages, vec![4]);
        assert_eq!(v[4].net.fusion, FusionMode::SfmCfm);
        assert_eq!(Suite::Stages.baseline(), "{}");
        for x in &v {
            x.net.validate().unwrap();
        }
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(0.26), "+0.26");
        assert_eq!(format_delta(-0.434), "-0.43");
        assert_eq!(format_delta(-0.001), "+0.00");
        assert_eq!(format_delta(0.0), "+0.00");
    }

    #[test]
    fn medians_and_table() {
        let report = AblationReport {
            title: "modules ablation".into(),
            baseline: "pwa-only".into(),
            labels: vec!["pwa-only".into(), "sfm+cfm".into()],
            runs: vec![
                fake_run("pwa-only", 0, 10),
                fake_run("pwa-only", 1, 30),
                fake_run("pwa-only", 2, 20),
                fake_run("sfm+cfm", 0, 40),
                fake_run("sfm+cfm", 1, 30),
                fake_run("sfm+cfm", 2, 90),
            ],
            num_classes: 2,
        };
        assert_eq!(report.median("pwa-only").unwrap().miou, summary(20).miou);
        assert_eq!(report.median("sfm+cfm").unwrap().miou, summary(40).miou);
        let table = report.to_table(&["a".into(), "b".into()]);
        let delta = format_delta(100.0 * (summary(40).miou - summary(20).miou));
        assert!(table.lines().nth(3).unwrap().contains(&format!("({delta})")), "{table}");
        assert!(!table.lines().nth(2).unwrap().contains('('));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("model,seed,miou,oa,kappa,iou_0,iou_1\n"));
    }

    #[test]
    fn harness_rows_match_independent_runs() {
        let spec = SceneSpec::with_classes(4, 16);
        let train: Vec<SceneSample> = (0..4).map(|i| generate_scene(&spec, 2 * i)).collect();
        let val: Vec<SceneSample> = (0..4).map(|i| generate_scene(&spec, 2 * i + 1)).collect();
        let base = TrainConfig {
            batch_size: 2,
            iterations: 2,
            eval_interval: 2,
            net: NetConfig {
                widths: vec![2, 3, 3, 4],
                blocks: 1,
                height: 16,
                width: 16,
                decoder_width: 3,
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        };
        let modules = ablate(Suite::Modules, &base, &[5], &train, &val, &|_, _, _| {}).unwrap();
        assert_eq!(modules.runs.len(), 6);
        let solo_cfg = TrainConfig {
            seed: 5,
            net: base.net.with_mode(FusionMode::PwaOnly),
            ..base.clone()
        };
        let solo = train_on(&solo_cfg, &train, &val, &mut |_| {}).unwrap();
        let pwa = modules.runs_for("pwa-only").next().unwrap();
        assert_eq!(pwa.checkpoint.tensors, solo.best.tensors);
        let stages = ablate(Suite::Stages, &base, &[5], &train, &val, &|_, _, _| {}).unwrap();
        let empty = stages.runs_for("{}").next().unwrap();
        assert_eq!(empty.checkpoint.tensors, pwa.checkpoint.tensors);
        assert_eq!(empty.summary, pwa.summary);
    }
}
