//! `occuscan` command-line interface.
//!
//! Exit codes for `detect`: 0 when nothing is flagged, 2 when any pair is
//! flagged, 1 on error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use occuscan::experiment::{self, ChannelSelection, DetectorSettings, ExperimentConfig};

#[derive(Parser)]
#[command(name = "occuscan", version, about = "Cache-occupancy timing-channel simulator and detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct DetectArgs {
    /// occupancy, miss or both
    #[arg(long)]
    channel: Option<ChannelSelection>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "max-lag")]
    max_lag: Option<usize>,
    /// Correlate occupancy levels instead of gain-loss filtered deltas.
    #[arg(long)]
    levels: bool,
}

impl DetectArgs {
    fn apply(&self, mut s: DetectorSettings) -> DetectorSettings {
        if let Some(c) = self.channel {
            s.channels = c;
        }
        if let Some(t) = self.threshold {
            s.threshold = t;
        }
        if self.max_lag.is_some() {
            s.max_lag = self.max_lag;
        }
        s.occupancy_levels |= self.levels;
        s
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, write traces and a detection report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Re-analyze a trace CSV.
    Detect {
        /// Trace CSV written by `run`.
        #[arg(long = "traces", alias = "config")]
        traces: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
        /// Also print the verdicts as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a scenario under several seeds and aggregate scores.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
    },
    /// Emit plot-ready CSV series from a trace CSV.
    PlotData {
        #[arg(long = "traces", alias = "config")]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
    },
}

fn load(path: &PathBuf, detect: &DetectArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.detector = detect.apply(cfg.detector);
    cfg.validate()?;
    Ok(cfg)
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, detect } => {
            let cfg = load(&config, &detect)?;
            let report = experiment::run_to_dir(&cfg, &out)
                .with_context(|| format!("running {}", config.display()))?;
            print!("{}", report.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect { traces, detect, json } => {
            let settings = detect.apply(DetectorSettings::default());
            let channels = experiment::detect_file(&traces, &settings)?;
            print!("{}", experiment::render_verdicts(&channels));
            if json {
                println!("{}", experiment::verdicts_json(&channels));
            }
            let flagged = channels.iter().any(|c| c.verdicts.iter().any(|v| v.flagged));
            Ok(if flagged { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Sweep { config, seeds, out, detect } => {
            let cfg = load(&config, &detect)?;
            let report = experiment::sweep_to_dir(&cfg, seeds, &out)?;
            print!("{}", report.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::PlotData { traces, out, detect } => {
            let settings = detect.apply(DetectorSettings::default());
            for p in experiment::plot_data(&traces, &out, &settings)? {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
