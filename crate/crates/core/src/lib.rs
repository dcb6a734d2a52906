//! Shared-cache occupancy simulation and timing-channel detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`cache`]: set-associative LRU cache with per-domain line ownership.
//! - [`workload`]: Prime+Probe trojan/spy drivers, benign generators and the
//!   scenario event loop.
//! - [`telemetry`]: per-window miss/occupancy sampling and the trace CSV format.
//! - [`detector`]: normalized cross-correlation, gain-loss filtering and
//!   pairwise verdicts.
//! - [`experiment`]: config files, runs, seed sweeps and reports.

pub mod cache;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod seed;
pub mod telemetry;
pub mod workload;

pub use cache::{
    build_conflict_sets, AccessKind, AccessOutcome, Cache, CacheGeometry, ConflictGroup, Cycle,
    DomainId, EvictionRecord, LineState,
};
pub use detector::{
    correlate_pair, cross_correlation, detect_pair, gain_loss_filter, pairwise_scan, Channel,
    CorrelationResult, DetectionVerdict,
};
pub use error::{CacheError, DetectError, ScenarioError, TraceError};
pub use telemetry::{derive_trace, read_traces, write_traces, DomainTrace, TraceKind, WindowSample};
pub use workload::{run_scenario, ScenarioConfig, ScenarioResult};
