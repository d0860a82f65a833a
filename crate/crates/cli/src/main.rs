use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use medconv_cli::commands::{self, EvalArgs, SweepArgs};
use medconv_cli::config::{Overrides, TrainConfig};
use medconv_cli::exit::exit_code;
use medconv_cli::train::run_training;
use medconv_core::calibration::SweepMode;
use medconv_core::data::Split;
use medconv_core::losses::LossKind;
use medconv_core::optimizers::OptimizerKind;

#[derive(Parser)]
#[command(name = "medconv", version, about = "Long-tailed volumetric classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Balce,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Sam,
    Schedulefree,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tied,
    FixedTau1,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic phantoms and a manifest.
    GenData {
        /// Phantom config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 750)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, log, logits and metrics.
    Train {
        /// Training config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        #[arg(long)]
        oversample: bool,
        #[arg(long)]
        balaug: bool,
        #[arg(long)]
        tau1: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        window_level: Option<f64>,
        #[arg(long)]
        window_width: Option<f64>,
    },
    /// Evaluate a run, reusing cached logits when possible.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Training config to check against the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 1.0)]
        tau1: f64,
        #[arg(long, default_value_t = 1.0)]
        tau2: f64,
        /// Report plain softmax probabilities.
        #[arg(long)]
        no_calibration: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep temperatures over cached logits.
    Sweep {
        #[arg(long)]
        run: PathBuf,
        /// Cached logits file; defaults to the run's eval-split cache.
        #[arg(long)]
        logits: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "fixed-tau1")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        tau1: f64,
        /// `a:b:step` or a comma-separated list.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare runs in one table.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[cfg(target_env = "gnu")]
fn tune_allocator() {
    // Training reuses large buffers every step; keeping them on the heap
    // instead of fresh mappings avoids repeated page faults.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, n, seed } => {
            let (manifest, counts) = commands::gen_data(config.as_deref(), &out, n, seed)?;
            for (name, c) in manifest.classes().iter().zip(&counts) {
                println!("{name}: {c}");
            }
            println!("wrote {} samples to {}", manifest.records().len(), out.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            seed,
            epochs,
            batch_size,
            loss,
            optimizer,
            oversample,
            balaug,
            tau1,
            tau2,
            window_level,
            window_width,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.apply(&Overrides {
                seed,
                tau1,
                tau2,
                loss: loss.map(|l| match l {
                    LossArg::Ce => LossKind::Ce,
                    LossArg::Balce => LossKind::Balce,
                }),
                optimizer: optimizer.map(|o| match o {
                    OptimizerArg::Sgd => OptimizerKind::Sgd,
                    OptimizerArg::Sam => OptimizerKind::Sam,
                    OptimizerArg::Schedulefree => OptimizerKind::Schedulefree,
                }),
                oversample,
                balaug,
                window_level,
                window_width,
                epochs,
                batch_size,
                manifest,
                out,
            });
            let outcome = run_training(&cfg)?;
            let r = &outcome.report;
            println!(
                "{} [{}]: accuracy {:.4}, f1 {:.4}, auc {:.4}",
                outcome.record.run_name, outcome.record.config_hash, r.accuracy, r.f1_weighted, r.roc_auc_macro_ovr
            );
        }
        Command::Eval {
            run,
            checkpoint,
            manifest,
            config,
            split,
            tau1,
            tau2,
            no_calibration,
            out,
        } => {
            let o = commands::eval(&EvalArgs {
                run,
                checkpoint,
                manifest,
                config,
                split: split.into(),
                tau1,
                tau2,
                calibrate: !no_calibration,
                out,
            })?;
            let r = &o.report;
            println!(
                "{}{}: accuracy {:.4}, sensitivity {:.4}, specificity {:.4}, f1 {:.4}, auc {:.4}",
                o.stem,
                if o.used_cache { " (cached logits)" } else { "" },
                r.accuracy,
                r.micro_sensitivity,
                r.micro_specificity,
                r.f1_weighted,
                r.roc_auc_macro_ovr
            );
        }
        Command::Sweep {
            run,
            logits,
            split,
            mode,
            tau1,
            grid,
            out,
        } => {
            let (table, path) = commands::sweep(&SweepArgs {
                run,
                logits,
                split: split.into(),
                mode: match mode {
                    ModeArg::Tied => SweepMode::Tied,
                    ModeArg::FixedTau1 => SweepMode::FixedTau1,
                },
                tau1,
                grid,
                out,
            })?;
            print!("{}", table.to_markdown());
            println!("wrote {}", path.display());
        }
        Command::Report { runs, out } => {
            let cmp = commands::report(&runs, &out)?;
            for w in &cmp.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} rows written to {}", cmp.rows.len(), out.join("comparison.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
