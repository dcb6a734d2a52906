//! Deterministic event loop over all domain drivers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{Cache, CacheGeometry, Cycle, DomainId, EvictionRecord};
use crate::error::ScenarioError;
use crate::telemetry::{Sampler, WindowSample};
use crate::workload::attack::{AttackChannel, AttackConfig, SpyDriver, TrojanDriver};
use crate::workload::benign::{BenignConfig, BenignDriver};
use crate::workload::bits::{decode_accuracy, BitSource};

pub const DEFAULT_WINDOW: Cycle = 10_000;

fn default_window() -> Cycle {
    DEFAULT_WINDOW
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub geometry: CacheGeometry,
    pub duration: Cycle,
    #[serde(default = "default_window")]
    pub window: Cycle,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub benign: Vec<BenignConfig>,
}

impl ScenarioConfig {
    /// All participating domains, ascending.
    pub fn domains(&self) -> Vec<DomainId> {
        let mut d: Vec<DomainId> = self
            .attack
            .iter()
            .flat_map(|a| [a.trojan, a.spy])
            .chain(self.benign.iter().map(|b| b.domain))
            .collect();
        d.sort();
        d
    }

    /// Fills every defaulted seed and parameter so the config is self-contained.
    pub fn resolve(&mut self) {
        let (geometry, seed) = (self.geometry, self.master_seed);
        if let Some(a) = &mut self.attack {
            a.resolve(&geometry, seed);
        }
        for b in &mut self.benign {
            b.resolve(&geometry, seed);
        }
    }

    /// Drops every derived seed so that they follow `master_seed` again.
    pub fn clear_derived_seeds(&mut self) {
        if let Some(a) = &mut self.attack {
            a.message_seed = None;
            a.noise_seed = None;
        }
        for b in &mut self.benign {
            b.seed = None;
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.geometry.validate()?;
        if self.window == 0 {
            return Err(ScenarioError::invalid("window", "must be > 0"));
        }
        if self.duration == 0 || self.duration % self.window != 0 {
            return Err(ScenarioError::invalid(
                "duration",
                format!("must be a positive multiple of window ({})", self.window),
            ));
        }
        let mut domains = self.domains();
        let n = domains.len();
        domains.dedup();
        if domains.len() != n {
            return Err(ScenarioError::invalid("domains", "domain ids must be unique"));
        }
        if n < 2 {
            return Err(ScenarioError::invalid("domains", "need at least 2 domains"));
        }
        if let Some(a) = &self.attack {
            a.validate(&self.geometry)?;
            if a.span() > self.duration {
                return Err(ScenarioError::invalid(
                    "attack.message_bits",
                    format!(
                        "{} bits need {} cycles but duration is {}",
                        a.message_bits,
                        a.span(),
                        self.duration
                    ),
                ));
            }
        }
        for b in &self.benign {
            b.validate(&self.geometry)?;
        }
        Ok(())
    }

    pub fn num_windows(&self) -> u64 {
        self.duration / self.window
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub domains: Vec<DomainId>,
    pub samples: Vec<WindowSample>,
    pub bits_sent: Vec<u8>,
    pub bits_decoded: Vec<u8>,
    pub decode_accuracy: Option<f64>,
    pub eviction_log: Vec<EvictionRecord>,
    /// Cumulative misses per domain at the end of the run, by domain order.
    pub total_misses: Vec<u64>,
    pub noise_accesses: u64,
}

enum Driver {
    Trojan(TrojanDriver),
    Spy(SpyDriver),
    Benign(BenignDriver),
}

impl Driver {
    fn domain(&self) -> DomainId {
        match self {
            Driver::Trojan(d) => d.domain(),
            Driver::Spy(d) => d.domain(),
            Driver::Benign(d) => d.domain(),
        }
    }

    fn next_ready(&self) -> Option<Cycle> {
        match self {
            Driver::Trojan(d) => d.next_ready(),
            Driver::Spy(d) => d.next_ready(),
            Driver::Benign(d) => d.next_ready(),
        }
    }

    fn step(&mut self, cache: &mut Cache, now: Cycle) -> Result<(), ScenarioError> {
        match self {
            Driver::Trojan(d) => d.step(cache, now)?,
            Driver::Spy(d) => d.step(cache, now)?,
            Driver::Benign(d) => {
                d.step(cache, now)?;
            }
        }
        Ok(())
    }
}

/// Runs a scenario to completion. Unresolved fields are resolved on a copy.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult, ScenarioError> {
    let mut config = config.clone();
    config.resolve();
    config.validate()?;

    let domains = config.domains();
    let mut cache = Cache::new(config.geometry, &domains)?;
    let mut sampler = Sampler::new(domains.clone());

    let mut drivers = Vec::new();
    let mut bits_sent = Vec::new();
    if let Some(attack) = &config.attack {
        let channel = Arc::new(AttackChannel::new(attack, &config.geometry)?);
        let message = BitSource::random(attack.message_bits, attack.message_seed.unwrap_or(0));
        bits_sent = message.bits.clone();
        drivers.push(Driver::Trojan(TrojanDriver::new(channel.clone(), &message)));
        drivers.push(Driver::Spy(SpyDriver::new(
            channel,
            attack.message_bits,
            attack.noise_seed.unwrap_or(0),
        )));
    }
    for b in &config.benign {
        drivers.push(Driver::Benign(BenignDriver::new(b, &config.geometry)));
    }
    drivers.sort_by_key(Driver::domain);

    let window = config.window;
    let num_windows = config.num_windows();
    let mut samples = Vec::with_capacity(num_windows as usize);
    cache.record_evictions();

    loop {
        // Earliest driver wins; `min_by_key` keeps the first (lowest id) on ties.
        let next = drivers
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.next_ready().map(|t| (t, i)))
            .min_by_key(|&(t, _)| t);
        let Some((now, idx)) = next.filter(|&(t, _)| t < config.duration) else {
            break;
        };
        while (samples.len() as u64 + 1) * window <= now {
            let w = samples.len() as u64;
            samples.push(sampler.sample_window(&cache, w));
        }
        drivers[idx].step(&mut cache, now)?;
    }
    while (samples.len() as u64) < num_windows {
        let w = samples.len() as u64;
        samples.push(sampler.sample_window(&cache, w));
    }

    let mut bits_decoded = Vec::new();
    let mut noise_accesses = 0;
    for d in &drivers {
        if let Driver::Spy(s) = d {
            bits_decoded = s.decoded().to_vec();
            noise_accesses = s.noise_accesses();
        }
    }
    let eviction_log = cache.take_eviction_log();
    let total_misses = domains
        .iter()
        .map(|&d| cache.misses(d))
        .collect::<Result<_, _>>()?;
    Ok(ScenarioResult {
        decode_accuracy: config
            .attack
            .as_ref()
            .and_then(|_| decode_accuracy(&bits_sent, &bits_decoded)),
        domains,
        samples,
        bits_sent,
        bits_decoded,
        eviction_log,
        total_misses,
        noise_accesses,
    })
}
