use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{assemble, View};
use super::eval::confusion;
use super::{AdamWState, Checkpoint, Precision, TrainConfig};
use crate::data::{splitmix64, Dataset, SceneSample, Split};
use crate::error::{Error, Result};
use crate::network::AsaNet;
use crate::nn::{cross_entropy, IGNORE_INDEX};
use crate::tensor::Element;

const SAMPLER_SALT: u64 = 0x5A4D_91E5;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub val_miou: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,loss,val_miou";

    pub fn csv(&self) -> String {
        let miou = self.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!("{},{:.9},{miou}", self.iteration, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the highest validation mIoU.
    pub best: Checkpoint,
    /// Parameters after the last iteration.
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LogRow::CSV_HEADER);
        out.push('\n');
        for r in &self.log {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Epoch-wise shuffled index stream over the training set.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn check_classes(cfg: &TrainConfig, samples: &[SceneSample]) -> Result<()> {
    match samples.iter().find(|s| s.num_classes != cfg.net.num_classes) {
        Some(s) => Err(Error::Config(format!(
            "dataset has {} classes, config asks for {}",
            s.num_classes, cfg.net.num_classes
        ))),
        None => Ok(()),
    }
}

fn run<T: Element>(
    cfg: &TrainConfig,
    train: &[SceneSample],
    val: &[SceneSample],
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    check_classes(cfg, train)?;
    check_classes(cfg, val)?;
    let (h, w) = (cfg.net.height, cfg.net.width);
    for s in train {
        let fits = if cfg.augment.crop { s.height >= h && s.width >= w } else { (s.height, s.width) == (h, w) };
        if !fits {
            return Err(Error::Config(format!(
                "training scene is {}×{}, network input is {h}×{w} (crop {})",
                s.height,
                s.width,
                if cfg.augment.crop { "on" } else { "off" }
            )));
        }
    }
    if let Some(s) = val.iter().find(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::Config(format!(
            "validation scene is {}×{}, network input is {h}×{w}",
            s.height, s.width
        )));
    }
    let mut model = AsaNet::<T>::new(&cfg.net, cfg.seed)?;
    let mut state = AdamWState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ SAMPLER_SALT));
    let mut sampler = Sampler {
        order: (0..train.len()).collect(),
        pos: train.len(),
    };
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut last_finite = f64::NAN;
    for it in 1..=cfg.iterations {
        let picks: Vec<&SceneSample> = (0..cfg.batch_size).map(|_| &train[sampler.next(&mut rng)]).collect();
        let views: Vec<View> = picks
            .iter()
            .map(|s| View::random(s, h, w, cfg.augment.crop, cfg.augment.flip, &mut rng))
            .collect();
        let batch = assemble::<T>(&picks, &views, h, w)?;
        let loss = cross_entropy(&model.forward(&batch.rgb, &batch.sar)?, &batch.labels, IGNORE_INDEX)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                iteration: it,
                last_finite,
            });
        }
        last_finite = value;
        loss.backward()?;
        loss.release_graph();
        cfg.optimizer.step(&mut model, &mut state)?;
        let mut row = LogRow {
            iteration: it,
            loss: value,
            val_miou: None,
        };
        if it % cfg.eval_interval == 0 {
            let miou = confusion(&model, val)?.summary()?.miou;
            row.val_miou = Some(miou);
            if best.as_ref().is_none_or(|b| miou > b.best_miou) {
                best = Some(Checkpoint::from_model(&model, it, miou, cfg));
            }
        }
        progress(&row);
        log.push(row);
    }
    let best = best.expect("iterations ≥ eval_interval guarantees one evaluation");
    let last = Checkpoint::from_model(&model, cfg.iterations, best.best_miou, cfg);
    Ok(TrainOutcome { best, last, log })
}

/// Trains from scratch on in-memory splits, in the configured precision.
pub fn train_on(
    cfg: &TrainConfig,
    train: &[SceneSample],
    val: &[SceneSample],
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, train, val, progress),
        Precision::F64 => run::<f64>(cfg, train, val, progress),
    }
}

/// Trains on the dataset named by `cfg.data`.
pub fn train(cfg: &TrainConfig, progress: &mut dyn FnMut(&LogRow)) -> Result<TrainOutcome> {
    let ds = Dataset::open(&cfg.data)?;
    let (tr, va) = (ds.load(Split::Train)?, ds.load(Split::Val)?);
    train_on(cfg, &tr, &va, progress)
}
