//! Optimizer, training loop, checkpoints, evaluation and the experiment
//! harnesses built on them.

mod ablation;
mod adamw;
mod batch;
mod bench;
mod checkpoint;
mod cloud;
mod config;
mod eval;
mod trainer;

pub use ablation::{ablate, format_delta, run_suite, run_variant, stage_label, AblationReport, Progress, RowMedian, RunResult, Suite, Variant, MODULE_ROWS, STAGE_MASKS};
pub use adamw::{AdamW, AdamWState};
pub use batch::{assemble, Batch, View};
pub use bench::{bench, bench_table, BenchRow};
pub use checkpoint::{sidecar_path, Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use cloud::{cloud_robustness, cloudy_split, CloudRow, CloudTable, Entry};
pub use config::{Augment, Precision, TrainConfig};
pub use eval::{confusion, evaluate, predict, write_label_png, write_prediction_pngs, EvalReport, PALETTE};
pub use trainer::{train, train_on, LogRow, TrainOutcome};
