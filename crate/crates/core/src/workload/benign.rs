//! Synthetic benign workloads.
//!
//! Three generators cover the irregular occupancy behaviour of ordinary
//! programs sharing a cache: a strided stream, uniform random accesses over a
//! working set, and a phased mix that alternates random activity with quiet
//! stretches in which the domain only loses lines to others.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{Cache, CacheGeometry, Cycle, DomainId};
use crate::error::{CacheError, ScenarioError};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenignKind {
    StreamingStride,
    RandomWorkingSet,
    PhasedMix,
}

fn default_phase_length() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenignConfig {
    pub domain: DomainId,
    pub kind: BenignKind,
    /// Bytes covered by the generator, starting at `base`.
    pub footprint: u64,
    /// Stream step in bytes; defaults to one line.
    #[serde(default)]
    pub stride: Option<u64>,
    /// Accesses per phase for the phased mix.
    #[serde(default = "default_phase_length")]
    pub phase_length: u64,
    /// Accesses per 1000 cycles.
    pub access_rate: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Byte offset of the footprint within the domain's namespace.
    #[serde(default)]
    pub base: u64,
    /// First cycle at which the generator issues accesses.
    #[serde(default)]
    pub start: Cycle,
}

impl BenignConfig {
    pub fn new(domain: DomainId, kind: BenignKind, footprint: u64, access_rate: f64) -> Self {
        BenignConfig {
            domain,
            kind,
            footprint,
            stride: None,
            phase_length: default_phase_length(),
            access_rate,
            seed: None,
            base: 0,
            start: 0,
        }
    }

    pub fn resolve(&mut self, geometry: &CacheGeometry, master_seed: u64) {
        self.stride.get_or_insert(geometry.line_size);
        self.seed.get_or_insert(seed::derive_seed(
            master_seed,
            seed::STREAM_BENIGN + u64::from(self.domain.0),
        ));
    }

    pub fn validate(&self, geometry: &CacheGeometry) -> Result<(), ScenarioError> {
        let field = |f: &str| format!("benign[domain={}].{f}", self.domain);
        if self.footprint < geometry.line_size {
            return Err(ScenarioError::invalid(
                field("footprint"),
                format!("must be at least one line ({} bytes)", geometry.line_size),
            ));
        }
        if !(self.access_rate.is_finite() && self.access_rate > 0.0) {
            return Err(ScenarioError::invalid(field("access_rate"), "must be > 0"));
        }
        if self.stride == Some(0) {
            return Err(ScenarioError::invalid(field("stride"), "must be > 0"));
        }
        if self.kind == BenignKind::PhasedMix && self.phase_length == 0 {
            return Err(ScenarioError::invalid(field("phase_length"), "must be > 0"));
        }
        if self
            .base
            .checked_add(self.footprint)
            .is_none_or(|end| end >= 1 << crate::cache::NAMESPACE_SHIFT)
        {
            return Err(ScenarioError::invalid(
                field("footprint"),
                "footprint does not fit in the domain namespace",
            ));
        }
        Ok(())
    }
}

/// Event-loop driver for one benign generator.
#[derive(Clone, Debug)]
pub struct BenignDriver {
    domain: DomainId,
    kind: BenignKind,
    base: u64,
    footprint_lines: u64,
    line_size: u64,
    stride: u64,
    phase_length: u64,
    gap: f64,
    rng: ChaCha8Rng,
    cursor: u64,
    issued: u64,
    /// Fractional-cycle schedule; integer part is the next issue time.
    next_at: f64,
}

impl BenignDriver {
    /// `config` must already be resolved.
    pub fn new(config: &BenignConfig, geometry: &CacheGeometry) -> Self {
        BenignDriver {
            domain: config.domain,
            kind: config.kind,
            base: config.base,
            footprint_lines: (config.footprint / geometry.line_size).max(1),
            line_size: geometry.line_size,
            stride: config.stride.unwrap_or(geometry.line_size),
            phase_length: config.phase_length,
            gap: 1000.0 / config.access_rate,
            rng: seed::rng(config.seed.unwrap_or(0)),
            cursor: 0,
            issued: 0,
            next_at: config.start as f64,
        }
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn next_ready(&self) -> Option<Cycle> {
        Some(self.next_at as Cycle)
    }

    fn random_line(&mut self) -> u64 {
        let line = self.rng.gen_range(0..self.footprint_lines);
        self.domain.address(self.base + line * self.line_size)
    }

    /// The next address this generator wants, or `None` for a quiet step.
    fn next_address(&mut self) -> Option<u64> {
        match self.kind {
            BenignKind::StreamingStride => {
                let footprint = self.footprint_lines * self.line_size;
                let addr = self.domain.address(self.base + self.cursor);
                self.cursor = (self.cursor + self.stride) % footprint;
                Some(addr)
            }
            BenignKind::RandomWorkingSet => Some(self.random_line()),
            BenignKind::PhasedMix => {
                let active = (self.issued / self.phase_length) % 2 == 0;
                active.then(|| self.random_line())
            }
        }
    }

    /// Issues the next access (or quiet step) at `now`; returns cycles consumed.
    pub fn step(&mut self, cache: &mut Cache, now: Cycle) -> Result<Cycle, CacheError> {
        let latency = match self.next_address() {
            Some(addr) => cache.access(self.domain, addr, now)?.latency,
            None => 0,
        };
        self.issued += 1;
        self.next_at = (now as f64 + latency as f64).max(self.next_at + self.gap);
        Ok(latency)
    }
}

/// Runs one generator step directly against a cache.
pub fn benign_step(
    driver: &mut BenignDriver,
    cache: &mut Cache,
    clock: Cycle,
) -> Result<Cycle, CacheError> {
    driver.step(cache, clock)
}
