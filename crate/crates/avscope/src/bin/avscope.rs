//! Command-line front end for the experiment pipeline: synthesize data,
//! train, calibrate, evaluate and bench the attention variants. Every
//! command is deterministic under a fixed seed and writes machine-readable
//! artifacts next to a short human summary on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use avscope::calibration::CalibrationMap;
use avscope::config::ExperimentConfig;
use avscope::error::Result;
use avscope::harness::{self, TrainOptions};
use avscope::separation::TrainMode;

#[derive(Parser)]
#[command(
    name = "avscope",
    version,
    about = "Audio-visual on-screen sound separation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's rng seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Separation-only warm start on mixture pairs.
    Pretrain,
    /// Separation plus the audio-visual on-screen classifier.
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/validation/test splits and write a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training phase and write checkpoint + loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by synth-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Pretrain)]
        mode: Mode,
        /// Initial weights, e.g. the pretrain checkpoint before joint
        /// training, or a partial run to resume from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<u64>,
        /// First step index; use with --pretrained to resume a run on its
        /// original batch and dropout schedule.
        #[arg(long, default_value_t = 0)]
        start_step: u64,
        /// Output directory for checkpoint, csv log and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the isotonic score calibration map on the validation split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by synth-data.
        #[arg(long)]
        data: PathBuf,
        /// Trained (joint) checkpoint to score with.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Weight calibration points by estimated source power.
        #[arg(long)]
        power_weighted: bool,
        /// Path for the calibration map file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split and write reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory produced by synth-data.
        #[arg(long)]
        data: PathBuf,
        /// Trained (joint) checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration map; adds a calibrated report when given.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Output directory for report JSON and text tables.
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure peak attention-tensor sizes and wall-clock per variant.
    BenchAttention {
        #[command(flatten)]
        common: Common,
        /// Refuse cells whose closed-form peak exceeds this element count.
        #[arg(long, default_value_t = 50_000_000)]
        limit: usize,
        /// Path for the results CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, out } => {
            let cfg = load_config(&common)?;
            let manifest = harness::synth_data(&cfg, &out)?;
            // Record the resolved config so the dataset is self-describing.
            cfg.save(&out.join("config.toml"))?;
            println!("dataset written to {}", out.display());
            for (split, entries) in &manifest.splits {
                println!("  {split}: {} examples", entries.len());
            }
            Ok(())
        }
        Command::Train { common, data, mode, pretrained, steps, start_step, out } => {
            let cfg = load_config(&common)?;
            let mode = match mode {
                Mode::Pretrain => TrainMode::PretrainSeparation,
                Mode::Joint => TrainMode::Joint,
            };
            let report = harness::train(
                &cfg,
                &data,
                &out,
                TrainOptions { mode, initial: pretrained.as_deref(), steps, start_step },
            )?;
            let summary_path = out.join("train_summary.json");
            let text = serde_json::to_string_pretty(&report).expect("summary serializes");
            std::fs::write(&summary_path, text)
                .map_err(|e| avscope::error::Error::io(summary_path.display().to_string(), e))?;
            println!(
                "{} training: {} steps, loss {:.4} -> {:.4}",
                report.mode, report.steps, report.first_loss, report.last_loss
            );
            println!("checkpoint: {}", report.checkpoint.display());
            println!("loss log:   {}", report.log.display());
            Ok(())
        }
        Command::Calibrate { common, data, checkpoint, power_weighted, out } => {
            let cfg = load_config(&common)?;
            let map = harness::calibrate(&cfg, &data, &checkpoint, &out, power_weighted)?;
            println!(
                "calibration map with {} points written to {}",
                map.breakpoints().len(),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate { common, data, checkpoint, map, out } => {
            let cfg = load_config(&common)?;
            let map = map.as_deref().map(CalibrationMap::load).transpose()?;
            let result = harness::evaluate(&cfg, &data, &checkpoint, map.as_ref(), &out)?;
            println!("uncalibrated:");
            print!("{}", result.uncalibrated.to_table());
            if let Some(cal) = &result.calibrated {
                println!("calibrated:");
                print!("{}", cal.to_table());
            }
            println!("reports written to {}", out.display());
            Ok(())
        }
        Command::BenchAttention { common, limit, out } => {
            let cfg = load_config(&common)?;
            let cells = harness::default_bench_cells(cfg.model.depth);
            let rows = harness::bench_attention(&cells, limit, cfg.seed)?;
            let csv = harness::bench_rows_to_csv(&rows);
            std::fs::write(&out, &csv)
                .map_err(|e| avscope::error::Error::io(out.display().to_string(), e))?;
            let refused = rows.iter().filter(|r| r.refused).count();
            println!(
                "benched {} cells ({} refused over the {limit}-element limit)",
                rows.len(),
                refused
            );
            println!("results: {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    harness::init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
