//! `yynet` command line: train, evaluate, inspect and ablate the
//! two-branch network, plus a synthetic-dataset generator for offline
//! experimentation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use yynet::ablate::ablate;
use yynet::checkpoint::{self, TrainState};
use yynet::config::{self, FileConfig};
use yynet::data;
use yynet::error::{AppError, AppResult};
use yynet::train;
use yynet_core::model::{count_config, reconcile_internals, YYNet};

#[derive(Parser)]
#[command(name = "yynet", version, about = "Two-branch convolutional network trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelSource {
    /// TOML config file with [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name: cifar16, cifar32, cifar64 or imagenet.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
}

impl ModelSource {
    fn resolve(&self) -> AppResult<FileConfig> {
        if let Some(path) = &self.config {
            return config::load(path);
        }
        let mut cfg = FileConfig::default();
        if let Some(name) = &self.preset {
            cfg.model = config::preset(name)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with the binary dataset batches.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use only the first N training records.
    #[arg(long)]
    subset_train: Option<usize>,
    /// Use only the first N test records.
    #[arg(long)]
    subset_test: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> AppResult<(data::DatasetSplit, data::DatasetSplit)> {
        let dir = data::resolve_data_dir(self.data.as_deref()).ok_or_else(|| {
            AppError::Config(
                "no dataset directory: pass --data, set YYNET_CIFAR10_DIR, or place the \
                 binary batches under data/cifar-10-batches-bin"
                    .into(),
            )
        })?;
        let (train_split, test_split) = data::load_cifar10(&dir)?;
        let train_split = match self.subset_train {
            Some(n) => train_split.take(n),
            None => train_split,
        };
        let test_split = match self.subset_test {
            Some(n) => test_split.take(n),
            None => test_split,
        };
        Ok((train_split, test_split))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics + checkpoints.
    Train {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory for metrics.csv and checkpoints.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the config batch size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Disable train-time augmentation.
        #[arg(long)]
        no_augment: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint file to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate the EMA shadow weights (default; falls back to live
        /// with a warning if the EMA is not yet active).
        #[arg(long, conflicts_with = "live")]
        ema: bool,
        /// Evaluate the live weights.
        #[arg(long)]
        live: bool,
    },
    /// Print the per-layer parameter table and total.
    Inspect {
        #[command(flatten)]
        source: ModelSource,
        /// Inspect a checkpoint instead of a config.
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        checkpoint: Option<PathBuf>,
        /// Run the internals grid search against the published counts and
        /// print the full grid report.
        #[arg(long)]
        reconcile: bool,
    },
    /// Train all six fusion formulas R times each and report mean/std.
    Ablate {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out/ablation")]
        out: PathBuf,
        /// Runs per formula.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        /// Epochs per run.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Generate a synthetic dataset in the canonical binary layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = data::TRAIN_RECORDS)]
        train_records: usize,
        #[arg(long, default_value_t = data::TEST_RECORDS)]
        test_records: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train {
            source,
            data: data_args,
            out,
            resume,
            seed,
            epochs,
            batch_size,
            no_augment,
        } => {
            let mut state = match resume {
                Some(path) => checkpoint::load(&path)?,
                None => {
                    let mut cfg = source.resolve()?;
                    if let Some(s) = seed {
                        cfg.train.seed = s;
                    }
                    if let Some(e) = epochs {
                        cfg.train.epochs = e;
                    }
                    if let Some(b) = batch_size {
                        cfg.train.batch_size = b;
                    }
                    if no_augment {
                        cfg.train.augment = false;
                    }
                    TrainState::new(cfg)?
                }
            };
            let (train_split, test_split) = data_args.load()?;
            std::fs::create_dir_all(&out)
                .map_err(|e| AppError::Io(format!("cannot create {}: {e}", out.display())))?;
            let stats = data::stats_cached(&train_split, &out)?;
            let outcome = train::train(&mut state, &train_split, &test_split, &stats, &out, true)?;
            println!("final test accuracy: {:.4}", outcome.final_accuracy);
            Ok(())
        }
        Command::Eval { checkpoint: ckpt, data: data_args, ema, live } => {
            let state = checkpoint::load(&ckpt)?;
            let (train_split, test_split) = data_args.load()?;
            let stats = data::compute_stats(&train_split);
            let want_shadow = ema || !live;
            if want_shadow && !state.ema.active() {
                eprintln!("warning: EMA not active in this checkpoint; evaluating live weights");
            }
            let acc = train::evaluate(&state, &test_split, &stats, want_shadow)?;
            println!("top-1 accuracy: {acc:.4}");
            Ok(())
        }
        Command::Inspect { source, checkpoint: ckpt, reconcile } => {
            let (model, progress) = match ckpt {
                Some(path) => {
                    let state = checkpoint::load(&path)?;
                    (state.model, Some(state.progress))
                }
                None => {
                    let cfg = source.resolve()?;
                    (YYNet::<f32>::build(&cfg.model, cfg.train.seed)?, None)
                }
            };
            let table = model.param_table();
            let mut total = 0usize;
            println!("{:<44} {:<18} {:>10}", "name", "shape", "params");
            for (name, shape, count) in &table {
                let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
                println!("{name:<44} {dims:<18} {count:>10}");
                total += count;
            }
            println!("{:-<74}", "");
            println!("{:<63} {total:>10}", "total trainable parameters");
            if let Some(p) = progress {
                println!(
                    "checkpoint progress: {} epochs, step {}, wd {}",
                    p.completed_epochs, p.global_step, p.current_wd
                );
            }
            if reconcile {
                let report = reconcile_internals();
                println!();
                println!("internals grid search against published counts 52882/191330/726274:");
                for e in &report.entries {
                    println!(
                        "e={} se_ratio={} resnet_bias={} project_bias={} se_reduce_bias={} \
                         se_gate_bias={} head_bias={} -> {} / {} / {} (|delta| {})",
                        e.internals.expansion_factor,
                        e.internals.se_ratio,
                        e.internals.resnet_conv_bias,
                        e.internals.mbconv_project_bias,
                        e.internals.se_reduce_bias,
                        e.internals.se_gate_bias,
                        e.internals.head_bias,
                        e.counts[0],
                        e.counts[1],
                        e.counts[2],
                        e.total_abs_delta()
                    );
                }
                println!(
                    "best: {:?} -> {:?} ({})",
                    report.best,
                    report.best_counts,
                    if report.exact { "exact match" } else { "closest" }
                );
            }
            let _ = count_config; // re-exported for library users
            Ok(())
        }
        Command::Ablate { source, data: data_args, out, runs, epochs, seed, batch_size } => {
            let mut cfg = source.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            let (train_split, test_split) = data_args.load()?;
            std::fs::create_dir_all(&out)
                .map_err(|e| AppError::Io(format!("cannot create {}: {e}", out.display())))?;
            let stats = data::stats_cached(&train_split, &out)?;
            let rows = ablate(&cfg, &train_split, &test_split, &stats, &out, runs, true)?;
            println!("{:<28} {:>6} {:>10} {:>10}", "formula", "runs", "mean", "std");
            for r in rows {
                println!(
                    "{:<28} {:>6} {:>9.2}% {:>9.2}%",
                    r.formula.formula(),
                    r.accuracies.len(),
                    r.mean * 100.0,
                    r.std * 100.0
                );
            }
            Ok(())
        }
        Command::SynthData { out, train_records, test_records, seed } => {
            data::write_synthetic(&out, train_records, test_records, seed)?;
            println!(
                "wrote {train_records} train + {test_records} test synthetic records to {}",
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit 0; usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
