//! Experiment orchestration: config files, single runs, seed sweeps, reports
//! and plot data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::DomainId;
use crate::detector::{self, Channel, DetectionVerdict, DEFAULT_THRESHOLD};
use crate::error::{DetectError, ScenarioError, TraceError};
use crate::seed;
use crate::telemetry::{self, derive_trace, domains_of, DomainTrace, WindowSample};
use crate::workload::{run_scenario, ScenarioConfig, ScenarioResult};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Config {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which detector channels to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelSelection {
    Occupancy,
    Miss,
    Both,
}

impl ChannelSelection {
    pub fn channels(self, occupancy_levels: bool) -> Vec<Channel> {
        let occ = if occupancy_levels {
            Channel::OccupancyLevel
        } else {
            Channel::OccupancyDelta
        };
        match self {
            ChannelSelection::Occupancy => vec![occ],
            ChannelSelection::Miss => vec![Channel::MissCount],
            ChannelSelection::Both => vec![occ, Channel::MissCount],
        }
    }
}

impl std::str::FromStr for ChannelSelection {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "occupancy" => Ok(ChannelSelection::Occupancy),
            "miss" => Ok(ChannelSelection::Miss),
            "both" => Ok(ChannelSelection::Both),
            other => Err(ExperimentError::Argument(format!(
                "unknown channel `{other}` (expected occupancy, miss or both)"
            ))),
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_selection() -> ChannelSelection {
    ChannelSelection::Both
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSettings {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Defaults to a quarter of the trace length.
    #[serde(default)]
    pub max_lag: Option<usize>,
    #[serde(default = "default_selection")]
    pub channels: ChannelSelection,
    /// Correlate occupancy levels instead of filtered deltas.
    #[serde(default)]
    pub occupancy_levels: bool,
    /// Windows per detection epoch; absent means one epoch over the whole trace.
    #[serde(default)]
    pub epoch_windows: Option<usize>,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            threshold: DEFAULT_THRESHOLD,
            max_lag: None,
            channels: ChannelSelection::Both,
            occupancy_levels: false,
            epoch_windows: None,
        }
    }
}

impl DetectorSettings {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ExperimentError::Argument(format!(
                "detector.threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.epoch_windows.is_some_and(|e| e < 2) {
            return Err(ExperimentError::Argument(
                "detector.epoch_windows must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// A scenario file: a named scenario plus detector settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub detector: DetectorSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config {
            path: origin.to_string(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut resolved = self.scenario.clone();
        resolved.resolve();
        resolved.validate()?;
        self.detector.validate()
    }

    /// Copy with every default materialized.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.scenario.resolve();
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy of this config for sweep index `i`. Index 0 is the config itself.
    pub fn for_sweep_seed(&self, i: usize) -> Self {
        let mut c = self.clone();
        if i > 0 {
            c.scenario.master_seed =
                seed::derive_seed(self.scenario.master_seed, seed::STREAM_SWEEP + i as u64);
            c.scenario.clear_derived_seeds();
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: Channel,
    pub verdicts: Vec<DetectionVerdict>,
    /// Per-epoch verdicts, when epochs are configured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<Vec<DetectionVerdict>>,
}

impl ChannelReport {
    pub fn verdict(&self, a: DomainId, b: DomainId) -> Option<&DetectionVerdict> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.verdicts.iter().find(|v| v.domain_pair == key)
    }
}

pub fn traces_for(
    samples: &[WindowSample],
    channel: Channel,
) -> Result<Vec<DomainTrace>, ExperimentError> {
    domains_of(samples)
        .into_iter()
        .map(|d| derive_trace(samples, d, channel.trace_kind()).map_err(Into::into))
        .collect()
}

/// Runs the detector over stored samples.
pub fn analyze(
    samples: &[WindowSample],
    settings: &DetectorSettings,
) -> Result<Vec<ChannelReport>, ExperimentError> {
    if samples.is_empty() {
        return Err(TraceError::NoWindows.into());
    }
    settings.validate()?;
    let n = samples.len();
    if let Some(m) = settings.max_lag {
        if m >= n {
            return Err(DetectError::LagOutOfRange { max_lag: m, len: n }.into());
        }
    }
    settings
        .channels
        .channels(settings.occupancy_levels)
        .into_iter()
        .map(|channel| {
            let traces = traces_for(samples, channel)?;
            let verdicts =
                detector::pairwise_scan(&traces, channel, settings.threshold, settings.max_lag)?;
            let epochs = match settings.epoch_windows {
                Some(e) => detector::epoch_scan(
                    &traces,
                    channel,
                    settings.threshold,
                    settings.max_lag,
                    e,
                )?,
                None => Vec::new(),
            };
            Ok(ChannelReport {
                channel,
                verdicts,
                epochs,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config: ExperimentConfig,
    pub windows: usize,
    pub domains: Vec<DomainId>,
    pub decode_accuracy: Option<f64>,
    pub bits_sent: usize,
    pub mutual_evictions: usize,
    pub channels: Vec<ChannelReport>,
    pub files: Vec<String>,
}

impl ExperimentReport {
    pub fn channel(&self, channel: Channel) -> Option<&ChannelReport> {
        self.channels.iter().find(|c| c.channel == channel)
    }

    pub fn any_flagged(&self) -> bool {
        self.channels
            .iter()
            .any(|c| c.verdicts.iter().any(|v| v.flagged))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment: {}", self.name);
        let _ = writeln!(
            s,
            "windows: {} x {} cycles, domains: {}",
            self.windows,
            self.config.scenario.window,
            self.domains
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        );
        if let Some(acc) = self.decode_accuracy {
            let _ = writeln!(s, "attack: {} bits, decode accuracy {:.4}", self.bits_sent, acc);
        }
        let _ = writeln!(s, "mutual evictions: {}", self.mutual_evictions);
        s.push_str(&render_verdicts(&self.channels));
        s
    }
}

pub fn verdicts_json(channels: &[ChannelReport]) -> String {
    serde_json::to_string_pretty(channels).expect("verdicts serialize")
}

pub fn render_verdicts(channels: &[ChannelReport]) -> String {
    let mut s = String::new();
    for c in channels {
        let _ = writeln!(s, "channel {}:", c.channel.name());
        for v in &c.verdicts {
            let _ = writeln!(
                s,
                "  pair {}-{}: score {:.4} lag {} {}{}",
                v.domain_pair.0,
                v.domain_pair.1,
                v.score,
                v.lag,
                if v.flagged { "FLAGGED" } else { "ok" },
                if v.degenerate { " (degenerate)" } else { "" }
            );
        }
    }
    s
}

/// Runs a config in memory and analyzes it.
pub fn run_experiment(
    config: &ExperimentConfig,
) -> Result<(ScenarioResult, ExperimentReport), ExperimentError> {
    config.detector.validate()?;
    let resolved = config.resolved();
    let result = run_scenario(&resolved.scenario)?;
    let channels = analyze(&result.samples, &resolved.detector)?;
    let report = ExperimentReport {
        name: resolved.name.clone(),
        windows: result.samples.len(),
        domains: result.domains.clone(),
        decode_accuracy: result.decode_accuracy,
        bits_sent: result.bits_sent.len(),
        mutual_evictions: result.eviction_log.iter().filter(|r| r.is_mutual()).count(),
        channels,
        files: Vec::new(),
        config: resolved,
    };
    Ok((result, report))
}

pub const TRACE_FILE: &str = "traces.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// `run`: simulate, write traces, analyze both channels, write reports.
pub fn run_to_dir(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    let (result, mut report) = run_experiment(config)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let trace_path = out_dir.join(TRACE_FILE);
    write(&trace_path, &telemetry::traces_to_string(&result.samples))?;
    write(&out_dir.join(RESOLVED_CONFIG), &report.config.to_toml())?;
    report.files = [TRACE_FILE, RESOLVED_CONFIG, REPORT_JSON, REPORT_TEXT]
        .iter()
        .map(|f| out_dir.join(f).display().to_string())
        .collect();
    write(
        &out_dir.join(REPORT_JSON),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    write(&out_dir.join(REPORT_TEXT), &report.to_text())?;
    Ok(report)
}

pub fn load_traces(path: &Path, capacity: Option<u64>) -> Result<Vec<WindowSample>, ExperimentError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(telemetry::read_traces(file, capacity)?)
}

/// `detect`: re-analyze a stored trace file.
pub fn detect_file(
    path: &Path,
    settings: &DetectorSettings,
) -> Result<Vec<ChannelReport>, ExperimentError> {
    let samples = load_traces(path, None)?;
    analyze(&samples, settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: (DomainId, DomainId),
    pub score: f64,
    pub lag: i64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub index: usize,
    pub master_seed: u64,
    pub decode_accuracy: Option<f64>,
    pub channels: Vec<(Channel, Vec<PairScore>)>,
}

impl SeedRun {
    pub fn score(&self, channel: Channel, a: DomainId, b: DomainId) -> Option<&PairScore> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.channels
            .iter()
            .find(|(c, _)| *c == channel)
            .and_then(|(_, s)| s.iter().find(|p| p.pair == key))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub channel: Channel,
    pub pair: (DomainId, DomainId),
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub flagged_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub seeds: usize,
    pub runs: Vec<SeedRun>,
    pub aggregates: Vec<Aggregate>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Runs `seeds` seed variants (in parallel) and aggregates their scores.
pub fn sweep(config: &ExperimentConfig, seeds: usize) -> Result<SweepReport, ExperimentError> {
    if seeds == 0 {
        return Err(ExperimentError::Argument("seeds must be at least 1".into()));
    }
    let runs = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let cfg = config.for_sweep_seed(i);
            let (_, report) = run_experiment(&cfg)?;
            Ok(SeedRun {
                index: i,
                master_seed: cfg.scenario.master_seed,
                decode_accuracy: report.decode_accuracy,
                channels: report
                    .channels
                    .iter()
                    .map(|c| {
                        let scores = c
                            .verdicts
                            .iter()
                            .map(|v| PairScore {
                                pair: v.domain_pair,
                                score: v.score,
                                lag: v.lag,
                                flagged: v.flagged,
                            })
                            .collect();
                        (c.channel, scores)
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;

    let mut aggregates = Vec::new();
    for (channel, pairs) in &runs[0].channels {
        for p in pairs {
            let mut scores: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.score(*channel, p.pair.0, p.pair.1))
                .map(|s| s.score)
                .collect();
            scores.sort_by(f64::total_cmp);
            let flagged_runs = runs
                .iter()
                .filter_map(|r| r.score(*channel, p.pair.0, p.pair.1))
                .filter(|s| s.flagged)
                .count();
            aggregates.push(Aggregate {
                channel: *channel,
                pair: p.pair,
                min: scores[0],
                median: median(&scores),
                max: *scores.last().expect("non-empty"),
                flagged_runs,
            });
        }
    }
    Ok(SweepReport {
        name: config.name.clone(),
        seeds,
        runs,
        aggregates,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed_index,master_seed,channel,domain_a,domain_b,score,lag,flagged\n");
        for r in &self.runs {
            for (c, scores) in &r.channels {
                for p in scores {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{:.6},{},{}",
                        r.index,
                        r.master_seed,
                        c.name(),
                        p.pair.0,
                        p.pair.1,
                        p.score,
                        p.lag,
                        p.flagged
                    );
                }
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("sweep: {} ({} seeds)\n", self.name, self.seeds);
        let accs: Vec<f64> = self.runs.iter().filter_map(|r| r.decode_accuracy).collect();
        if !accs.is_empty() {
            let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
            let _ = writeln!(s, "min decode accuracy: {min:.4}");
        }
        for a in &self.aggregates {
            let _ = writeln!(
                s,
                "{} pair {}-{}: min {:.4} median {:.4} max {:.4} flagged {}/{}",
                a.channel.name(),
                a.pair.0,
                a.pair.1,
                a.min,
                a.median,
                a.max,
                a.flagged_runs,
                self.seeds
            );
        }
        s
    }
}

pub fn sweep_to_dir(
    config: &ExperimentConfig,
    seeds: usize,
    out_dir: &Path,
) -> Result<SweepReport, ExperimentError> {
    let report = sweep(config, seeds)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write(&out_dir.join("sweep.csv"), &report.to_csv())?;
    write(
        &out_dir.join("sweep.json"),
        &serde_json::to_string_pretty(&report).expect("serializes"),
    )?;
    write(&out_dir.join("sweep.txt"), &report.to_text())?;
    Ok(report)
}

/// `plot-data`: tidy CSV series for occupancy deltas, miss deltas and the
/// correlation-vs-lag profile of every pair on each channel.
pub fn plot_data(
    trace_path: &Path,
    out_dir: &Path,
    settings: &DetectorSettings,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let samples = load_traces(trace_path, None)?;
    if samples.is_empty() {
        return Err(TraceError::NoWindows.into());
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    for (channel, file) in [
        (Channel::OccupancyDelta, "occupancy_delta.csv"),
        (Channel::MissCount, "miss_delta.csv"),
    ] {
        let traces = traces_for(&samples, channel)?;
        let mut s = String::from("window,domain,value\n");
        for t in &traces {
            for (w, v) in samples.iter().zip(&t.values) {
                let _ = writeln!(s, "{},{},{}", w.window_index, t.domain, v);
            }
        }
        let path = out_dir.join(file);
        write(&path, &s)?;
        written.push(path);
    }

    for channel in settings.channels.channels(settings.occupancy_levels) {
        let traces = traces_for(&samples, channel)?;
        let mut s = String::from("domain_a,domain_b,lag,gamma\n");
        for i in 0..traces.len() {
            for j in i + 1..traces.len() {
                let r = detector::correlate_pair(&traces[i], &traces[j], channel, settings.max_lag)?;
                for (lag, g) in r.lags().zip(&r.gammas) {
                    let _ = writeln!(s, "{},{},{},{:.9}", traces[i].domain, traces[j].domain, lag, g);
                }
            }
        }
        let path = out_dir.join(format!("correlation_{}.csv", channel.name()));
        write(&path, &s)?;
        written.push(path);
    }
    Ok(written)
}
