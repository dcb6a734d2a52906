//! Shared set-associative cache with per-line domain ownership.
//!
//! Every resident line is attributed to the domain whose miss filled it, and
//! the per-domain occupancy ledger is updated on every fill, eviction and
//! flush. Replacement is strict LRU within a set.
//!
//! Addresses are namespaced: the bits at and above [`NAMESPACE_SHIFT`] carry
//! the owning [`DomainId`], so two domains can never hit on each other's
//! lines. Since the namespace bits are part of the tag, lines of different
//! domains that map to the same set always have distinct tags.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::CacheError;

/// Simulation time in cycles.
pub type Cycle = u64;

/// First address bit that belongs to the domain namespace.
pub const NAMESPACE_SHIFT: u32 = 40;

const LOCAL_MASK: u64 = (1 << NAMESPACE_SHIFT) - 1;

/// A security domain (simulated core / process).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u16);

impl DomainId {
    /// Builds an address inside this domain's namespace.
    ///
    /// `local` is truncated to the bits below [`NAMESPACE_SHIFT`].
    pub fn address(self, local: u64) -> u64 {
        (u64::from(self.0) << NAMESPACE_SHIFT) | (local & LOCAL_MASK)
    }

    /// The domain whose namespace contains `address`.
    pub fn owning(address: u64) -> DomainId {
        DomainId((address >> NAMESPACE_SHIFT) as u16)
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Shape and timing of the simulated cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheGeometry {
    pub num_sets: usize,
    pub ways: usize,
    pub line_size: u64,
    pub hit_latency: Cycle,
    pub miss_latency: Cycle,
}

impl Default for CacheGeometry {
    /// 512KB, 8-way, 64B lines.
    fn default() -> Self {
        CacheGeometry {
            num_sets: 1024,
            ways: 8,
            line_size: 64,
            hit_latency: 20,
            miss_latency: 100,
        }
    }
}

impl CacheGeometry {
    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |msg: String| Err(CacheError::InvalidGeometry(msg));
        if self.num_sets == 0 || !self.num_sets.is_power_of_two() {
            return bad(format!("num_sets must be a power of two, got {}", self.num_sets));
        }
        if self.ways == 0 {
            return bad("ways must be positive".into());
        }
        if self.line_size == 0 || !self.line_size.is_power_of_two() {
            return bad(format!("line_size must be a power of two, got {}", self.line_size));
        }
        if self.hit_latency == 0 || self.miss_latency <= self.hit_latency {
            return bad(format!(
                "latencies must satisfy miss > hit > 0, got hit={} miss={}",
                self.hit_latency, self.miss_latency
            ));
        }
        if (self.num_sets as u64).saturating_mul(self.line_size) > LOCAL_MASK {
            return bad("cache too large for the address namespace".into());
        }
        Ok(())
    }

    pub fn capacity_lines(&self) -> u64 {
        (self.num_sets * self.ways) as u64
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_lines() * self.line_size
    }

    fn offset_bits(&self) -> u32 {
        self.line_size.trailing_zeros()
    }

    fn index_bits(&self) -> u32 {
        self.num_sets.trailing_zeros()
    }

    pub fn set_index(&self, address: u64) -> usize {
        ((address >> self.offset_bits()) as usize) & (self.num_sets - 1)
    }

    /// Tag bits, including the namespace bits.
    pub fn tag(&self, address: u64) -> u64 {
        address >> (self.offset_bits() + self.index_bits())
    }

    /// Midpoint of hit and miss latency.
    pub fn default_latency_threshold(&self) -> Cycle {
        (self.hit_latency + self.miss_latency) / 2
    }
}

/// One way of one set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineState {
    pub valid: bool,
    pub tag: u64,
    pub owner: DomainId,
    /// 0 = most recently used. Only meaningful for valid lines.
    pub lru_rank: u32,
}

impl LineState {
    const INVALID: LineState = LineState {
        valid: false,
        tag: 0,
        owner: DomainId(0),
        lru_rank: 0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionRecord {
    pub cycle: Cycle,
    pub set_index: usize,
    pub victim_domain: DomainId,
    pub evictor_domain: DomainId,
}

impl EvictionRecord {
    pub fn is_mutual(&self) -> bool {
        self.victim_domain != self.evictor_domain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessKind {
    Hit,
    Miss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessOutcome {
    pub kind: AccessKind,
    pub latency: Cycle,
    pub eviction: Option<EvictionRecord>,
}

impl AccessOutcome {
    pub fn is_hit(&self) -> bool {
        self.kind == AccessKind::Hit
    }
}

/// Per-domain counters kept alongside the occupancy value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DomainCounters {
    pub occupancy: u64,
    pub flush_audit: u64,
    pub hits: u64,
    pub misses: u64,
}

/// Occupancy and flush-audit accounting, indexed directly by domain id.
#[derive(Clone, Debug, Default)]
pub struct OccupancyLedger {
    slots: Vec<Option<DomainCounters>>,
}

impl OccupancyLedger {
    fn register(&mut self, domain: DomainId) {
        let idx = usize::from(domain.0);
        if self.slots.len() <= idx {
            self.slots.resize(idx + 1, None);
        }
        self.slots[idx].get_or_insert_with(DomainCounters::default);
    }

    pub fn get(&self, domain: DomainId) -> Option<&DomainCounters> {
        self.slots.get(usize::from(domain.0)).and_then(Option::as_ref)
    }

    fn get_mut(&mut self, domain: DomainId) -> Option<&mut DomainCounters> {
        self.slots.get_mut(usize::from(domain.0)).and_then(Option::as_mut)
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| DomainId(i as u16))
    }

    pub fn total_occupancy(&self) -> u64 {
        self.slots.iter().flatten().map(|c| c.occupancy).sum()
    }
}

/// The shared cache.
#[derive(Clone, Debug)]
pub struct Cache {
    geometry: CacheGeometry,
    lines: Vec<LineState>,
    ledger: OccupancyLedger,
    free_lines: u64,
    eviction_log: Option<Vec<EvictionRecord>>,
}

impl Cache {
    pub fn new(geometry: CacheGeometry, domains: &[DomainId]) -> Result<Self, CacheError> {
        geometry.validate()?;
        let mut ledger = OccupancyLedger::default();
        for &d in domains {
            ledger.register(d);
        }
        Ok(Cache {
            geometry,
            lines: vec![LineState::INVALID; geometry.num_sets * geometry.ways],
            ledger,
            free_lines: geometry.capacity_lines(),
            eviction_log: None,
        })
    }

    pub fn geometry(&self) -> &CacheGeometry {
        &self.geometry
    }

    pub fn ledger(&self) -> &OccupancyLedger {
        &self.ledger
    }

    /// Starts recording every eviction (self-evictions included).
    pub fn record_evictions(&mut self) {
        self.eviction_log.get_or_insert_with(Vec::new);
    }

    pub fn take_eviction_log(&mut self) -> Vec<EvictionRecord> {
        self.eviction_log.take().unwrap_or_default()
    }

    pub fn free_lines(&self) -> u64 {
        self.free_lines
    }

    pub fn set_lines(&self, set_index: usize) -> &[LineState] {
        let w = self.geometry.ways;
        &self.lines[set_index * w..(set_index + 1) * w]
    }

    fn counters(&self, domain: DomainId) -> Result<&DomainCounters, CacheError> {
        self.ledger.get(domain).ok_or(CacheError::UnknownDomain(domain))
    }

    pub fn occupancy(&self, domain: DomainId) -> Result<u64, CacheError> {
        Ok(self.counters(domain)?.occupancy)
    }

    pub fn flush_audit(&self, domain: DomainId) -> Result<u64, CacheError> {
        Ok(self.counters(domain)?.flush_audit)
    }

    /// Cumulative misses issued by `domain`.
    pub fn misses(&self, domain: DomainId) -> Result<u64, CacheError> {
        Ok(self.counters(domain)?.misses)
    }

    pub fn hits(&self, domain: DomainId) -> Result<u64, CacheError> {
        Ok(self.counters(domain)?.hits)
    }

    fn check_namespace(&self, domain: DomainId, address: u64) -> Result<(), CacheError> {
        self.counters(domain)?;
        if DomainId::owning(address) != domain {
            return Err(CacheError::NamespaceViolation { domain, address });
        }
        Ok(())
    }

    fn find(&self, set_index: usize, tag: u64) -> Option<usize> {
        self.set_lines(set_index)
            .iter()
            .position(|l| l.valid && l.tag == tag)
    }

    pub fn contains(&self, address: u64) -> bool {
        let set = self.geometry.set_index(address);
        self.find(set, self.geometry.tag(address)).is_some()
    }

    pub fn access(
        &mut self,
        domain: DomainId,
        address: u64,
        now: Cycle,
    ) -> Result<AccessOutcome, CacheError> {
        self.check_namespace(domain, address)?;
        let set_index = self.geometry.set_index(address);
        let tag = self.geometry.tag(address);
        let base = set_index * self.geometry.ways;

        if let Some(way) = self.find(set_index, tag) {
            let rank = self.lines[base + way].lru_rank;
            for line in &mut self.lines[base..base + self.geometry.ways] {
                if line.valid && line.lru_rank < rank {
                    line.lru_rank += 1;
                }
            }
            self.lines[base + way].lru_rank = 0;
            self.ledger.get_mut(domain).expect("checked").hits += 1;
            return Ok(AccessOutcome {
                kind: AccessKind::Hit,
                latency: self.geometry.hit_latency,
                eviction: None,
            });
        }

        let set = &mut self.lines[base..base + self.geometry.ways];
        let (way, eviction) = match set.iter().position(|l| !l.valid) {
            Some(way) => {
                for line in set.iter_mut().filter(|l| l.valid) {
                    line.lru_rank += 1;
                }
                self.free_lines -= 1;
                (way, None)
            }
            None => {
                let (way, victim) = set
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, l)| l.lru_rank)
                    .map(|(w, l)| (w, *l))
                    .expect("ways > 0");
                for line in set.iter_mut() {
                    if line.lru_rank < victim.lru_rank {
                        line.lru_rank += 1;
                    }
                }
                let record = EvictionRecord {
                    cycle: now,
                    set_index,
                    victim_domain: victim.owner,
                    evictor_domain: domain,
                };
                (way, Some(record))
            }
        };
        set[way] = LineState {
            valid: true,
            tag,
            owner: domain,
            lru_rank: 0,
        };
        if let Some(rec) = &eviction {
            // Victim owners are always registered: only registered domains fill.
            self.ledger
                .get_mut(rec.victim_domain)
                .expect("victim registered")
                .occupancy -= 1;
            if let Some(log) = &mut self.eviction_log {
                log.push(*rec);
            }
        }
        let counters = self.ledger.get_mut(domain).expect("checked");
        counters.occupancy += 1;
        counters.misses += 1;
        Ok(AccessOutcome {
            kind: AccessKind::Miss,
            latency: self.geometry.miss_latency,
            eviction,
        })
    }

    /// Invalidates the line holding `address`, if resident. Every call is audited.
    pub fn flush(&mut self, domain: DomainId, address: u64) -> Result<bool, CacheError> {
        self.check_namespace(domain, address)?;
        let set_index = self.geometry.set_index(address);
        let tag = self.geometry.tag(address);
        self.ledger.get_mut(domain).expect("checked").flush_audit += 1;
        let Some(way) = self.find(set_index, tag) else {
            return Ok(false);
        };
        let base = set_index * self.geometry.ways;
        let rank = self.lines[base + way].lru_rank;
        for line in &mut self.lines[base..base + self.geometry.ways] {
            if line.valid && line.lru_rank > rank {
                line.lru_rank -= 1;
            }
        }
        self.lines[base + way] = LineState::INVALID;
        self.free_lines += 1;
        self.ledger.get_mut(domain).expect("checked").occupancy -= 1;
        Ok(true)
    }
}

/// Addresses that all map to one cache set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictGroup {
    pub set_index: usize,
    pub addresses: Vec<u64>,
}

/// Builds `num_groups` groups of same-set addresses inside `domain`'s namespace.
///
/// Groups are spread evenly across the set index space; group `i` of two
/// different domains built with the same parameters lands in the same set.
pub fn build_conflict_sets(
    geometry: &CacheGeometry,
    domain: DomainId,
    num_groups: usize,
    addresses_per_group: usize,
) -> Result<Vec<ConflictGroup>, CacheError> {
    geometry.validate()?;
    if num_groups == 0 || num_groups > geometry.num_sets {
        return Err(CacheError::InfeasibleConflictSets(format!(
            "num_groups must be in 1..={}, got {num_groups}",
            geometry.num_sets
        )));
    }
    if addresses_per_group < geometry.ways {
        return Err(CacheError::InfeasibleConflictSets(format!(
            "addresses_per_group ({addresses_per_group}) must be at least ways ({})",
            geometry.ways
        )));
    }
    let stride_sets = geometry.num_sets / num_groups;
    let set_span = geometry.num_sets as u64 * geometry.line_size;
    if (addresses_per_group as u64).saturating_mul(set_span) > LOCAL_MASK {
        return Err(CacheError::InfeasibleConflictSets(
            "addresses do not fit in the domain namespace".into(),
        ));
    }
    Ok((0..num_groups)
        .map(|g| {
            let set_index = g * stride_sets;
            let offset = set_index as u64 * geometry.line_size;
            let addresses = (0..addresses_per_group as u64)
                .map(|k| domain.address(offset + k * set_span))
                .collect();
            ConflictGroup {
                set_index,
                addresses,
            }
        })
        .collect())
}
