use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asanet::data::{make_dataset, Dataset, SceneSpec, Split};
use asanet::gradsuite;
use asanet::network::{AsaNet, NetConfig};
use asanet::train::{
    ablate, bench, bench_table, cloud_robustness, evaluate, predict, train, write_prediction_pngs, Checkpoint, Entry,
    LogRow, Suite, TrainConfig,
};
use asanet::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asanet", version, about = "RGB-SAR fusion segmentation: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural RGB-SAR dataset with a 1:1 train/val split
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (even)
        #[arg(long, default_value_t = 1024)]
        n: u64,
        /// Scene side length in pixels
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Cloud coverage in [0, 1]
        #[arg(long, default_value_t = 0.4)]
        cloud: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and keep the checkpoint with the best validation mIoU
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss / validation log as CSV
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write one palette PNG per predicted scene
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
    /// Train every row of an ablation suite over several seeds
    Ablate {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds, counted up from the config seed
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Per-run CSV; the median table goes next to it as .txt
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on the validation split under increasing cloud cover
    CloudBench {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6")]
        coverages: Vec<f64>,
        /// Dataset whose manifest defines the scenes (defaults to the one in the first checkpoint's config)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck,
    /// Parameters, analytic FLOPs and inference throughput of every fusion mode
    Bench {
        /// Take the network geometry from this training config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn print_row(prefix: &str, row: &LogRow) {
    match row.val_miou {
        Some(m) => eprintln!("{prefix}iter {:>6}  loss {:.4}  val mIoU {:.2}", row.iteration, row.loss, 100.0 * m),
        None if row.iteration % 100 == 0 => eprintln!("{prefix}iter {:>6}  loss {:.4}", row.iteration, row.loss),
        None => {}
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, n, size, classes, cloud, seed } => {
            let spec = SceneSpec {
                cloud_coverage: cloud,
                seed,
                ..SceneSpec::with_classes(classes, size)
            };
            let m = make_dataset(&spec, n, &out)?;
            println!("wrote {} train and {} val scenes to {}", m.train.len(), m.val.len(), out.display());
        }
        Command::Train { config, out, log } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = train(&cfg, &mut |row| print_row("", row))?;
            outcome.best.save(&out)?;
            if let Some(log) = log {
                write(&log, &outcome.log_csv())?;
            }
            println!(
                "best val mIoU {:.2} at iteration {}; saved {}",
                100.0 * outcome.best.best_miou,
                outcome.best.iteration,
                out.display()
            );
        }
        Command::Eval { ckpt, data, split, report, png_dir } => {
            let model: AsaNet<f32> = Checkpoint::load(&ckpt)?.to_model()?;
            let ds = Dataset::open(&data)?;
            let samples = ds.load(split)?;
            let result = evaluate(&model, &samples, &ds.manifest.spec.class_names)?;
            let text = result.to_text();
            print!("{text}");
            if let Some(report) = report {
                write(&report, &text)?;
            }
            if let Some(dir) = png_dir {
                let net = model.config();
                write_prediction_pngs(&dir, &predict(&model, &samples)?, ds.manifest.files(split), net.height, net.width)?;
            }
        }
        Command::Ablate { suite, config, seeds, out } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = Dataset::open(&cfg.data)?;
            let (tr, va) = (ds.load(Split::Train)?, ds.load(Split::Val)?);
            let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let report = ablate(suite, &cfg, &seeds, &tr, &va, &|label, seed, row| {
                print_row(&format!("[{label} seed {seed}] "), row)
            })?;
            let table = report.to_table(&ds.manifest.spec.class_names);
            write(&out, &report.to_csv())?;
            write(&out.with_extension("txt"), &table)?;
            print!("{table}");
        }
        Command::CloudBench { ckpt, coverages, data, out } => {
            let ckpts = ckpt.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let models = ckpts.iter().map(|c| c.to_model::<f32>()).collect::<Result<Vec<_>>>()?;
            let data = data.unwrap_or_else(|| ckpts[0].config.data.clone());
            let manifest = Dataset::open(&data)?.manifest;
            let entries: Vec<Entry<'_>> = ckpts
                .iter()
                .zip(&models)
                .map(|(c, m)| Entry {
                    label: c.config.net.fusion.name().to_string(),
                    seed: c.config.seed,
                    model: m,
                })
                .collect();
            let table = cloud_robustness(&entries, &manifest.spec, manifest.count, &coverages)?;
            print!("{}", table.to_table());
            if let Some(out) = out {
                write(&out, &table.to_csv())?;
            }
        }
        Command::Gradcheck => {
            let results = gradsuite::run_suite()?;
            let mut ok = true;
            for r in &results {
                println!("{}", r.line());
                ok &= r.report.passed;
            }
            let secs: f64 = results.iter().map(|r| r.seconds).sum();
            println!("{} of {} checks passed in {secs:.1}s", results.iter().filter(|r| r.report.passed).count(), results.len());
            return Ok(ok);
        }
        Command::Bench { config, batch, repeats, out } => {
            let net = match config {
                Some(path) => TrainConfig::load(&path)?.net,
                None => NetConfig::default(),
            };
            let rows = bench(&net, batch, repeats)?;
            print!("{}", bench_table(&rows));
            if let Some(out) = out {
                let mut csv = String::from(asanet::train::BenchRow::CSV_HEADER);
                csv.push('\n');
                for r in &rows {
                    csv.push_str(&r.csv());
                    csv.push('\n');
                }
                write(&out, &csv)?;
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
