//! Prime+Probe covert-channel drivers.
//!
//! Time is divided into slots of `round_budget` cycles. Slot `k` opens with
//! the spy probing every communication set (which also re-primes them) and,
//! at `transmit_offset` into the slot, the trojan transmits bit `k`. The probe
//! at the start of slot `k` therefore decodes bit `k - 1`; the probe in slot 0
//! is the initial prime and its result is discarded. A message of `n` bits
//! uses `n + 1` slots.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{build_conflict_sets, Cache, CacheGeometry, ConflictGroup, Cycle, DomainId};
use crate::error::{CacheError, ScenarioError};
use crate::seed;
use crate::workload::bits::BitSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Trojan fills the communication sets for a 1 and idles for a 0.
    SingleGroup,
    /// Trojan fills the odd half of the groups for a 1, the even half for a 0.
    MultiGroup,
}

fn default_message_bits() -> usize {
    64
}
fn default_conflict_groups() -> usize {
    32
}
fn default_comm_groups() -> usize {
    16
}
fn default_round_budget() -> Cycle {
    50_000
}

/// Attack parameters as written in a scenario file. Optional fields are
/// filled in by [`AttackConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub protocol: Protocol,
    pub trojan: DomainId,
    pub spy: DomainId,
    #[serde(default = "default_message_bits")]
    pub message_bits: usize,
    #[serde(default)]
    pub message_seed: Option<u64>,
    /// Total conflict groups; the first `comm_groups` carry the message and
    /// the rest are reserved for noise.
    #[serde(default = "default_conflict_groups")]
    pub conflict_groups: usize,
    #[serde(default = "default_comm_groups")]
    pub comm_groups: usize,
    #[serde(default)]
    pub noise_enabled: bool,
    /// Addresses per noise group. More than `ways` makes every noise access
    /// a self-evicting miss.
    #[serde(default)]
    pub noise_depth: Option<usize>,
    #[serde(default)]
    pub noise_seed: Option<u64>,
    #[serde(default = "default_round_budget")]
    pub round_budget: Cycle,
    #[serde(default)]
    pub transmit_offset: Option<Cycle>,
    #[serde(default)]
    pub latency_threshold: Option<Cycle>,
}

impl AttackConfig {
    pub fn new(protocol: Protocol, trojan: DomainId, spy: DomainId) -> Self {
        AttackConfig {
            protocol,
            trojan,
            spy,
            message_bits: default_message_bits(),
            message_seed: None,
            conflict_groups: default_conflict_groups(),
            comm_groups: default_comm_groups(),
            noise_enabled: false,
            noise_depth: None,
            noise_seed: None,
            round_budget: default_round_budget(),
            transmit_offset: None,
            latency_threshold: None,
        }
    }

    /// Materializes every defaulted field.
    pub fn resolve(&mut self, geometry: &CacheGeometry, master_seed: u64) {
        self.message_seed
            .get_or_insert(seed::derive_seed(master_seed, seed::STREAM_MESSAGE));
        self.noise_seed
            .get_or_insert(seed::derive_seed(master_seed, seed::STREAM_NOISE));
        self.noise_depth.get_or_insert(geometry.ways * 4);
        self.transmit_offset.get_or_insert(self.round_budget / 2);
        self.latency_threshold
            .get_or_insert(geometry.default_latency_threshold());
    }

    pub fn noise_groups(&self) -> usize {
        self.conflict_groups.saturating_sub(self.comm_groups)
    }

    /// Cycles covered by the whole transmission, including the final probe.
    pub fn span(&self) -> Cycle {
        (self.message_bits as Cycle + 1) * self.round_budget
    }

    pub fn validate(&self, geometry: &CacheGeometry) -> Result<(), ScenarioError> {
        let bad = |f: &str, r: String| Err(ScenarioError::invalid(format!("attack.{f}"), r));
        if self.trojan == self.spy {
            return bad("spy", "trojan and spy must be different domains".into());
        }
        if self.message_bits == 0 {
            return bad("message_bits", "must be at least 1".into());
        }
        if self.comm_groups == 0 || self.comm_groups > self.conflict_groups {
            return bad(
                "comm_groups",
                format!("must be in 1..={}", self.conflict_groups),
            );
        }
        if self.conflict_groups > geometry.num_sets {
            return bad(
                "conflict_groups",
                format!("cannot exceed num_sets ({})", geometry.num_sets),
            );
        }
        if self.protocol == Protocol::MultiGroup && self.comm_groups % 2 != 0 {
            return bad(
                "comm_groups",
                "multi-group protocol needs an even number of groups".into(),
            );
        }
        if self.noise_enabled && self.noise_groups() == 0 {
            return bad("noise_enabled", "no groups left over for noise".into());
        }
        if let Some(depth) = self.noise_depth {
            if depth < geometry.ways {
                return bad("noise_depth", format!("must be at least ways ({})", geometry.ways));
            }
        }
        let comm_lines = (self.comm_groups * geometry.ways) as Cycle;
        let sweep = comm_lines * geometry.miss_latency;
        let offset = self.transmit_offset.unwrap_or(self.round_budget / 2);
        // The probe may start up to one access late if a noise access is in flight.
        if sweep + geometry.miss_latency > offset {
            return bad(
                "transmit_offset",
                format!("{offset} cycles leaves no room for a {sweep}-cycle probe"),
            );
        }
        if offset + sweep > self.round_budget {
            return bad(
                "round_budget",
                format!(
                    "{} cycles cannot hold a transmit at offset {offset} lasting {sweep}",
                    self.round_budget
                ),
            );
        }
        Ok(())
    }
}

/// Per-domain address groups for one attack.
#[derive(Clone, Debug)]
pub struct AttackChannel {
    pub protocol: Protocol,
    pub trojan: DomainId,
    pub spy: DomainId,
    pub trojan_groups: Vec<ConflictGroup>,
    pub spy_groups: Vec<ConflictGroup>,
    pub noise_groups: Vec<ConflictGroup>,
    pub noise_enabled: bool,
    pub round_budget: Cycle,
    pub transmit_offset: Cycle,
    pub latency_threshold: Cycle,
    pub miss_latency: Cycle,
}

impl AttackChannel {
    /// Builds the address groups. `config` must already be resolved.
    pub fn new(config: &AttackConfig, geometry: &CacheGeometry) -> Result<Self, ScenarioError> {
        config.validate(geometry)?;
        let depth = config.noise_depth.unwrap_or(geometry.ways * 4);
        let per_group = geometry.ways.max(depth);
        let trim = |mut groups: Vec<ConflictGroup>| {
            for g in &mut groups {
                g.addresses.truncate(geometry.ways);
            }
            groups
        };
        let trojan_groups = trim(build_conflict_sets(
            geometry,
            config.trojan,
            config.conflict_groups,
            geometry.ways,
        )?)
        .into_iter()
        .take(config.comm_groups)
        .collect();
        let mut spy_all =
            build_conflict_sets(geometry, config.spy, config.conflict_groups, per_group)?;
        let mut noise_groups = spy_all.split_off(config.comm_groups);
        for g in &mut noise_groups {
            g.addresses.truncate(depth);
        }
        Ok(AttackChannel {
            protocol: config.protocol,
            trojan: config.trojan,
            spy: config.spy,
            trojan_groups,
            spy_groups: trim(spy_all),
            noise_groups,
            noise_enabled: config.noise_enabled,
            round_budget: config.round_budget,
            transmit_offset: config.transmit_offset.unwrap_or(config.round_budget / 2),
            latency_threshold: config
                .latency_threshold
                .unwrap_or(geometry.default_latency_threshold()),
            miss_latency: geometry.miss_latency,
        })
    }

    pub fn comm_sets(&self) -> Vec<usize> {
        self.spy_groups.iter().map(|g| g.set_index).collect()
    }

    pub fn noise_sets(&self) -> Vec<usize> {
        self.noise_groups.iter().map(|g| g.set_index).collect()
    }

    /// Addresses the trojan touches to send `bit`. Empty for an idle round.
    pub fn trojan_plan(&self, bit: u8) -> Vec<u64> {
        let pick = |odd: bool| {
            self.trojan_groups
                .iter()
                .enumerate()
                .filter(move |(i, _)| (i % 2 == 1) == odd)
                .flat_map(|(_, g)| g.addresses.iter().copied())
        };
        match (self.protocol, bit) {
            (Protocol::SingleGroup, 0) => Vec::new(),
            (Protocol::SingleGroup, _) => self
                .trojan_groups
                .iter()
                .flat_map(|g| g.addresses.iter().copied())
                .collect(),
            (Protocol::MultiGroup, 0) => pick(false).collect(),
            (Protocol::MultiGroup, _) => pick(true).collect(),
        }
    }

    fn probe_len(&self) -> usize {
        self.spy_groups.iter().map(|g| g.addresses.len()).sum()
    }

    /// Decodes a bit from per-group probe latencies.
    pub fn decode(&self, group_latency: &[Cycle]) -> u8 {
        match self.protocol {
            Protocol::SingleGroup => {
                let total: Cycle = group_latency.iter().sum();
                u8::from(total > self.latency_threshold * self.probe_len() as Cycle)
            }
            Protocol::MultiGroup => {
                let (mut odd, mut even) = (0, 0);
                for (i, l) in group_latency.iter().enumerate() {
                    if i % 2 == 1 {
                        odd += l;
                    } else {
                        even += l;
                    }
                }
                u8::from(odd > even)
            }
        }
    }

    /// Executes one transmit round starting at `clock`; returns cycles consumed.
    ///
    /// An idle round still accounts for the cycles a full transmission would take.
    pub fn trojan_round(&self, bit: u8, cache: &mut Cache, clock: Cycle) -> Result<Cycle, CacheError> {
        let plan = self.trojan_plan(bit);
        if plan.is_empty() {
            let lines: usize = self.trojan_groups.iter().map(|g| g.addresses.len()).sum();
            return Ok(lines as Cycle * self.miss_latency);
        }
        let mut t = clock;
        for a in plan {
            t += cache.access(self.trojan, a, t)?.latency;
        }
        Ok(t - clock)
    }

    /// Executes one probe round starting at `clock` and returns the decoded bit.
    ///
    /// With noise enabled, noise bursts drawn from `noise_rng` are interleaved
    /// exactly as the scenario driver would interleave them.
    pub fn spy_round(
        &self,
        cache: &mut Cache,
        clock: Cycle,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<u8, CacheError> {
        let mut engine = SpyEngine::new(clock);
        engine.schedule_slot(self, 0, clock, noise_rng, false);
        let mut decoded = None;
        while let Some(start) = engine.next_pending() {
            let now = start.max(engine.free_at);
            if let Some((_, bit)) = engine.step(self, cache, now)? {
                decoded = Some(bit);
            }
        }
        Ok(decoded.expect("probe job always completes"))
    }
}

#[derive(Clone, Debug)]
struct ProbeJob {
    slot: usize,
    start: Cycle,
    group: usize,
    index: usize,
    group_latency: Vec<Cycle>,
}

#[derive(Clone, Debug)]
struct NoiseJob {
    start: Cycle,
    group: usize,
    index: usize,
}

/// Spy-side work queue: probes take priority over noise bursts, and noise
/// bursts run in order of their scheduled start.
#[derive(Clone, Debug)]
struct SpyEngine {
    probes: VecDeque<ProbeJob>,
    noise: VecDeque<NoiseJob>,
    free_at: Cycle,
    noise_accesses: u64,
}

impl SpyEngine {
    fn new(free_at: Cycle) -> Self {
        SpyEngine {
            probes: VecDeque::new(),
            noise: VecDeque::new(),
            free_at,
            noise_accesses: 0,
        }
    }

    fn schedule_slot(
        &mut self,
        channel: &AttackChannel,
        slot: usize,
        start: Cycle,
        rng: Option<&mut ChaCha8Rng>,
        prewarm_noise: bool,
    ) {
        self.probes.push_back(ProbeJob {
            slot,
            start,
            group: 0,
            index: 0,
            group_latency: vec![0; channel.spy_groups.len()],
        });
        if !channel.noise_enabled {
            return;
        }
        let mut jobs = Vec::new();
        if prewarm_noise {
            jobs.extend((0..channel.noise_groups.len()).map(|group| NoiseJob {
                start,
                group,
                index: 0,
            }));
        }
        if let Some(rng) = rng {
            let n = channel.noise_groups.len();
            let k = rng.gen_range(0..=n);
            for group in index::sample(rng, n, k).into_vec() {
                let offset = rng.gen_range(0..channel.round_budget);
                jobs.push(NoiseJob {
                    start: start + offset,
                    group,
                    index: 0,
                });
            }
        }
        // Stable sort keeps draw order among equal starts.
        self.noise.extend(jobs);
        self.noise.make_contiguous().sort_by_key(|j| j.start);
    }

    fn next_pending(&self) -> Option<Cycle> {
        let p = self.probes.front().map(|j| j.start);
        let n = self.noise.front().map(|j| j.start);
        match (p, n) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Issues one access at `now`. Returns `(slot, bit)` when a probe completes.
    fn step(
        &mut self,
        channel: &AttackChannel,
        cache: &mut Cache,
        now: Cycle,
    ) -> Result<Option<(usize, u8)>, CacheError> {
        if let Some(job) = self.probes.front_mut().filter(|j| j.start <= now) {
            let group = &channel.spy_groups[job.group];
            let out = cache.access(channel.spy, group.addresses[job.index], now)?;
            job.group_latency[job.group] += out.latency;
            self.free_at = now + out.latency;
            job.index += 1;
            if job.index == group.addresses.len() {
                job.index = 0;
                job.group += 1;
            }
            if job.group == channel.spy_groups.len() {
                let job = self.probes.pop_front().expect("front exists");
                return Ok(Some((job.slot, channel.decode(&job.group_latency))));
            }
            return Ok(None);
        }
        if let Some(job) = self.noise.front_mut().filter(|j| j.start <= now) {
            let group = &channel.noise_groups[job.group];
            let out = cache.access(channel.spy, group.addresses[job.index], now)?;
            self.free_at = now + out.latency;
            self.noise_accesses += 1;
            job.index += 1;
            if job.index == group.addresses.len() {
                self.noise.pop_front();
            }
            return Ok(None);
        }
        // Nothing due yet; caller woke us early.
        self.free_at = self.free_at.max(now);
        Ok(None)
    }
}

/// Event-loop driver for the trojan.
#[derive(Clone, Debug)]
pub struct TrojanDriver {
    channel: Arc<AttackChannel>,
    bits: Vec<u8>,
    /// Slots with a non-idle transmission, ascending.
    active_slots: Vec<usize>,
    next: usize,
    plan: VecDeque<u64>,
    free_at: Cycle,
}

impl TrojanDriver {
    pub fn new(channel: Arc<AttackChannel>, bits: &BitSource) -> Self {
        let active_slots = (0..bits.len())
            .filter(|&s| channel.protocol == Protocol::MultiGroup || bits.bits[s] != 0)
            .collect();
        TrojanDriver {
            channel,
            bits: bits.bits.clone(),
            active_slots,
            next: 0,
            plan: VecDeque::new(),
            free_at: 0,
        }
    }

    fn slot_start(&self, slot: usize) -> Cycle {
        slot as Cycle * self.channel.round_budget + self.channel.transmit_offset
    }

    pub fn domain(&self) -> DomainId {
        self.channel.trojan
    }

    pub fn next_ready(&self) -> Option<Cycle> {
        if !self.plan.is_empty() {
            return Some(self.free_at);
        }
        self.active_slots
            .get(self.next)
            .map(|&s| self.slot_start(s).max(self.free_at))
    }

    pub fn step(&mut self, cache: &mut Cache, now: Cycle) -> Result<(), CacheError> {
        if self.plan.is_empty() {
            if let Some(&slot) = self.active_slots.get(self.next) {
                if self.slot_start(slot) <= now {
                    self.plan.extend(self.channel.trojan_plan(self.bits[slot]));
                    self.next += 1;
                }
            }
        }
        if let Some(addr) = self.plan.pop_front() {
            let out = cache.access(self.channel.trojan, addr, now)?;
            self.free_at = now + out.latency;
        }
        Ok(())
    }
}

/// Event-loop driver for the spy.
#[derive(Clone, Debug)]
pub struct SpyDriver {
    channel: Arc<AttackChannel>,
    slots: usize,
    next_slot: usize,
    engine: SpyEngine,
    rng: ChaCha8Rng,
    decoded: Vec<u8>,
}

impl SpyDriver {
    pub fn new(channel: Arc<AttackChannel>, message_bits: usize, noise_seed: u64) -> Self {
        SpyDriver {
            channel,
            slots: message_bits + 1,
            next_slot: 0,
            engine: SpyEngine::new(0),
            rng: seed::rng(noise_seed),
            decoded: Vec::with_capacity(message_bits),
        }
    }

    pub fn domain(&self) -> DomainId {
        self.channel.spy
    }

    fn slot_start(&self, slot: usize) -> Cycle {
        slot as Cycle * self.channel.round_budget
    }

    pub fn next_ready(&self) -> Option<Cycle> {
        let slot = (self.next_slot < self.slots).then(|| self.slot_start(self.next_slot));
        let pending = match (self.engine.next_pending(), slot) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        pending.map(|t| t.max(self.engine.free_at))
    }

    pub fn step(&mut self, cache: &mut Cache, now: Cycle) -> Result<(), CacheError> {
        while self.next_slot < self.slots && self.slot_start(self.next_slot) <= now {
            let slot = self.next_slot;
            self.engine.schedule_slot(
                &self.channel,
                slot,
                self.slot_start(slot),
                Some(&mut self.rng),
                slot == 0,
            );
            self.next_slot += 1;
        }
        if let Some((slot, bit)) = self.engine.step(&self.channel, cache, now)? {
            if slot > 0 {
                self.decoded.push(bit);
            }
        }
        Ok(())
    }

    pub fn decoded(&self) -> &[u8] {
        &self.decoded
    }

    pub fn noise_accesses(&self) -> u64 {
        self.engine.noise_accesses
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheGeometry;

    const SPY: DomainId = DomainId(0);
    const TROJAN: DomainId = DomainId(1);

    fn channel(protocol: Protocol, noise: bool) -> (AttackChannel, CacheGeometry) {
        let g = CacheGeometry::default();
        let mut cfg = AttackConfig::new(protocol, TROJAN, SPY);
        cfg.noise_enabled = noise;
        cfg.resolve(&g, 1);
        (AttackChannel::new(&cfg, &g).unwrap(), g)
    }

    fn primed(ch: &AttackChannel, g: CacheGeometry) -> Cache {
        let mut cache = Cache::new(g, &[SPY, TROJAN]).unwrap();
        ch.spy_round(&mut cache, 0, None).unwrap();
        cache
    }

    #[test]
    fn single_group_one_swaps_occupancy() {
        let (ch, g) = channel(Protocol::SingleGroup, false);
        let mut cache = primed(&ch, g);
        let spy_before = cache.occupancy(SPY).unwrap();
        assert_eq!(spy_before, 128);
        let cycles = ch.trojan_round(1, &mut cache, 100_000).unwrap();
        assert_eq!(cycles, 128 * g.miss_latency);
        assert_eq!(cache.occupancy(TROJAN).unwrap(), 16 * 8);
        assert_eq!(cache.occupancy(SPY).unwrap(), spy_before - 128);
        assert_eq!(ch.spy_round(&mut cache, 200_000, None).unwrap(), 1);
        assert_eq!(cache.occupancy(SPY).unwrap(), 128);
        assert_eq!(cache.occupancy(TROJAN).unwrap(), 0);
    }

    #[test]
    fn single_group_zero_is_idle() {
        let (ch, g) = channel(Protocol::SingleGroup, false);
        let mut cache = primed(&ch, g);
        let misses = cache.misses(TROJAN).unwrap() + cache.hits(TROJAN).unwrap();
        ch.trojan_round(0, &mut cache, 100_000).unwrap();
        assert_eq!(cache.misses(TROJAN).unwrap() + cache.hits(TROJAN).unwrap(), misses);
        assert_eq!(cache.occupancy(SPY).unwrap(), 128);
        assert_eq!(ch.spy_round(&mut cache, 200_000, None).unwrap(), 0);
    }

    #[test]
    fn multi_group_halves_are_disjoint() {
        let (ch, g) = channel(Protocol::MultiGroup, false);
        let mut cache = primed(&ch, g);
        let sets_of = |cache: &mut Cache, bit: u8, t: Cycle| {
            let mut sets = std::collections::BTreeSet::new();
            for a in ch.trojan_plan(bit) {
                if let Some(r) = cache.access(TROJAN, a, t).unwrap().eviction {
                    sets.insert(r.set_index);
                }
            }
            sets
        };
        let one = sets_of(&mut cache, 1, 10);
        assert_eq!(ch.spy_round(&mut cache, 20, None).unwrap(), 1);
        let zero = sets_of(&mut cache, 0, 30);
        assert_eq!(ch.spy_round(&mut cache, 40, None).unwrap(), 0);
        assert_eq!(one.len(), 8);
        assert_eq!(zero.len(), 8);
        assert!(one.is_disjoint(&zero));
    }

    #[test]
    fn noise_stays_in_noise_sets() {
        let (ch, g) = channel(Protocol::SingleGroup, true);
        let mut cache = Cache::new(g, &[SPY, TROJAN]).unwrap();
        let mut rng = seed::rng(3);
        let allowed: std::collections::BTreeSet<usize> =
            ch.comm_sets().into_iter().chain(ch.noise_sets()).collect();
        for r in 0..8 {
            ch.spy_round(&mut cache, r * 100_000, Some(&mut rng)).unwrap();
        }
        for set in 0..g.num_sets {
            let used = cache.set_lines(set).iter().any(|l| l.valid);
            assert_eq!(used, allowed.contains(&set), "set {set}");
        }
    }

    #[test]
    fn config_validation() {
        let g = CacheGeometry::default();
        let mut cfg = AttackConfig::new(Protocol::SingleGroup, TROJAN, TROJAN);
        assert!(cfg.validate(&g).is_err());
        cfg.spy = SPY;
        assert!(cfg.validate(&g).is_ok());
        cfg.round_budget = 10_000;
        assert!(cfg.validate(&g).is_err());
        let mut cfg = AttackConfig::new(Protocol::MultiGroup, TROJAN, SPY);
        cfg.comm_groups = 15;
        assert!(cfg.validate(&g).is_err());
        let mut cfg = AttackConfig::new(Protocol::SingleGroup, TROJAN, SPY);
        cfg.comm_groups = 32;
        cfg.noise_enabled = true;
        assert!(cfg.validate(&g).is_err());
    }
}
