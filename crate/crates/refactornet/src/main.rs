use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use refactornet::commands::{self, default_tag, RunDir, Split};
use refactornet::config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "refactornet",
    version,
    about = "Temporal action localization with feature refactoring"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; unset fields keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set stage2.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides)
    }

    /// Like `load`, but falls back to the run's saved config for `tag`.
    fn load_for_run(&self, run: &RunDir, tag: &str) -> Result<PipelineConfig> {
        let snapshot = run.config(tag);
        match (&self.config, snapshot.exists()) {
            (None, true) => PipelineConfig::load(Some(&snapshot), &self.overrides),
            _ => self.load(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for the manifest, features and annotations.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Mine pairs, train the encoders, then train jointly with the detector.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        run: PathBuf,
        /// Train a detector on raw features, without encoders.
        #[arg(long)]
        baseline: bool,
        /// Name of this system inside the run (default: refactored or baseline).
        #[arg(long)]
        tag: Option<String>,
        /// Stage-1 checkpoint to start from instead of training stage 1.
        #[arg(long)]
        resume_stage1: Option<PathBuf>,
    },
    /// Detect actions with a trained system.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        run: PathBuf,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        tag: Option<String>,
        /// Checkpoint to use instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Score detections: mAP per tIoU threshold and high-quality diagnostics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        run: PathBuf,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        tag: Option<String>,
        /// Detections CSV to score instead of the run's own.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write SVG figures and their CSV data for a run.
    Report {
        #[arg(short, long)]
        run: PathBuf,
        /// Boundary-curve figures per inference run.
        #[arg(long, default_value_t = 4)]
        videos: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => {
            commands::synth(&cfg.load()?, &out)?;
        }
        Command::Train {
            cfg,
            run,
            baseline,
            tag,
            resume_stage1,
        } => {
            let tag = tag.unwrap_or_else(|| default_tag(baseline).into());
            let s = commands::train(&cfg.load()?, &RunDir(run), baseline, &tag, resume_stage1.as_deref())?;
            log::info!("checkpoint {}", s.checkpoint.display());
        }
        Command::Infer {
            cfg,
            run,
            baseline,
            tag,
            checkpoint,
            split,
        } => {
            let run = RunDir(run);
            let tag = tag.unwrap_or_else(|| default_tag(baseline).into());
            let config = cfg.load_for_run(&run, &tag)?;
            commands::infer(&config, &run, baseline, &tag, checkpoint.as_deref(), split)?;
        }
        Command::Eval {
            cfg,
            run,
            baseline,
            tag,
            detections,
            split,
        } => {
            let run = RunDir(run);
            let tag = tag.unwrap_or_else(|| default_tag(baseline).into());
            let config = cfg.load_for_run(&run, &tag)?;
            let proposals = run.proposals(&tag);
            let (dets, props) = match detections {
                Some(d) => (d, None),
                None => (run.detections(&tag), proposals.exists().then_some(proposals)),
            };
            let s = commands::eval(&config, &dets, props.as_deref(), split, &tag)?;
            commands::write_eval(&run, &tag, &s)?;
            print!("{}", s.table);
            match s.diagnostics {
                Some(d) => println!(
                    "high-quality proposals (tIoU > 0.7): {}, accuracy {:.4}, mean tIoU {:.4}",
                    d.count, d.accuracy, d.mean_tiou
                ),
                None => println!("high-quality proposals (tIoU > 0.7): none"),
            }
        }
        Command::Report { run, videos } => {
            let s = commands::report(&RunDir(run), videos)?;
            log::info!("wrote {} report files", s.written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
