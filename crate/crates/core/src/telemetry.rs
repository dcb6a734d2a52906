//! Window sampling of per-domain miss counts and occupancy, trace
//! derivation, and the trace CSV format.
//!
//! The CSV header is `window,domain,miss_delta,occupancy_end`, with one row
//! per (window, domain), windows ascending and domains ascending within a
//! window. Integers are plain decimal and lines end in `\n`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cache::{Cache, DomainId};
use crate::error::TraceError;

pub const CSV_HEADER: &str = "window,domain,miss_delta,occupancy_end";

/// One domain's counters for one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainWindow {
    pub domain: DomainId,
    pub miss_delta: u64,
    pub occupancy_end: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSample {
    pub window_index: u64,
    /// Sorted by domain.
    pub domains: Vec<DomainWindow>,
}

impl WindowSample {
    pub fn get(&self, domain: DomainId) -> Option<&DomainWindow> {
        self.domains
            .binary_search_by_key(&domain, |d| d.domain)
            .ok()
            .map(|i| &self.domains[i])
    }
}

/// Remembers cumulative miss counts between window boundaries.
#[derive(Clone, Debug)]
pub struct Sampler {
    domains: Vec<DomainId>,
    last_misses: Vec<u64>,
}

impl Sampler {
    pub fn new(mut domains: Vec<DomainId>) -> Self {
        domains.sort();
        domains.dedup();
        let n = domains.len();
        Sampler {
            domains,
            last_misses: vec![0; n],
        }
    }

    /// Snapshots the cache at the close of `window_index`.
    pub fn sample_window(&mut self, cache: &Cache, window_index: u64) -> WindowSample {
        let domains = self
            .domains
            .iter()
            .zip(&mut self.last_misses)
            .map(|(&domain, last)| {
                let misses = cache.misses(domain).expect("sampler domains are registered");
                let miss_delta = misses - *last;
                *last = misses;
                DomainWindow {
                    domain,
                    miss_delta,
                    occupancy_end: cache.occupancy(domain).expect("registered"),
                }
            })
            .collect();
        WindowSample {
            window_index,
            domains,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    OccupancyLevel,
    OccupancyDelta,
    MissCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTrace {
    pub domain: DomainId,
    pub kind: TraceKind,
    pub values: Vec<f64>,
}

/// Extracts one domain's series. Occupancy deltas assume an empty cache
/// before the first window.
pub fn derive_trace(
    samples: &[WindowSample],
    domain: DomainId,
    kind: TraceKind,
) -> Result<DomainTrace, TraceError> {
    derive_trace_from(samples, domain, kind, 0)
}

/// As [`derive_trace`], with an explicit occupancy before the first window.
pub fn derive_trace_from(
    samples: &[WindowSample],
    domain: DomainId,
    kind: TraceKind,
    initial_occupancy: u64,
) -> Result<DomainTrace, TraceError> {
    if samples.is_empty() {
        return Err(TraceError::NoWindows);
    }
    let rows = samples
        .iter()
        .map(|s| s.get(domain).ok_or(TraceError::UnknownDomain(domain)))
        .collect::<Result<Vec<_>, _>>()?;
    let values = match kind {
        TraceKind::OccupancyLevel => rows.iter().map(|r| r.occupancy_end as f64).collect(),
        TraceKind::MissCount => rows.iter().map(|r| r.miss_delta as f64).collect(),
        TraceKind::OccupancyDelta => {
            let mut prev = initial_occupancy as i64;
            rows.iter()
                .map(|r| {
                    let level = r.occupancy_end as i64;
                    let d = level - prev;
                    prev = level;
                    d as f64
                })
                .collect()
        }
    };
    Ok(DomainTrace {
        domain,
        kind,
        values,
    })
}

/// Domains present in the samples, ascending.
pub fn domains_of(samples: &[WindowSample]) -> Vec<DomainId> {
    samples
        .first()
        .map(|s| s.domains.iter().map(|d| d.domain).collect())
        .unwrap_or_default()
}

pub fn write_traces<W: Write>(samples: &[WindowSample], dest: W) -> Result<(), TraceError> {
    let mut w = std::io::BufWriter::new(dest);
    writeln!(w, "{CSV_HEADER}")?;
    for s in samples {
        for d in &s.domains {
            writeln!(
                w,
                "{},{},{},{}",
                s.window_index, d.domain, d.miss_delta, d.occupancy_end
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn traces_to_string(samples: &[WindowSample]) -> String {
    let mut buf = Vec::new();
    write_traces(samples, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

/// Parses a trace CSV. With `capacity`, occupancy values above it are rejected.
pub fn read_traces<R: Read>(
    source: R,
    capacity: Option<u64>,
) -> Result<Vec<WindowSample>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();

    let header = match records.next() {
        None => {
            return Err(TraceError::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
        Some(r) => r.map_err(|e| csv_err(e, 1))?,
    };
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(TraceError::Parse {
            line: 1,
            reason: format!("expected header `{CSV_HEADER}`"),
        });
    }

    let mut samples: Vec<WindowSample> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(e, line))?;
        if rec.len() != 4 {
            return Err(TraceError::Parse {
                line,
                reason: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let field = |idx: usize, name: &str| -> Result<u64, TraceError> {
            let raw = &rec[idx];
            let ok = !raw.is_empty()
                && raw.bytes().all(|b| b.is_ascii_digit())
                && (raw == "0" || !raw.starts_with('0'));
            let parsed = ok.then(|| raw.parse::<u64>().ok()).flatten();
            parsed.ok_or_else(|| TraceError::Parse {
                line,
                reason: format!("{name}: `{raw}` is not a decimal integer"),
            })
        };
        let window = field(0, "window")?;
        let domain = field(1, "domain")?;
        let domain = u16::try_from(domain).map(DomainId).map_err(|_| TraceError::Parse {
            line,
            reason: format!("domain {domain} out of range"),
        })?;
        let miss_delta = field(2, "miss_delta")?;
        let occupancy_end = field(3, "occupancy_end")?;
        if let Some(cap) = capacity {
            if occupancy_end > cap {
                return Err(TraceError::OccupancyBound {
                    line,
                    occupancy: occupancy_end,
                    capacity: cap,
                });
            }
        }
        let row = DomainWindow {
            domain,
            miss_delta,
            occupancy_end,
        };
        match samples.last_mut() {
            Some(s) if s.window_index == window => {
                let last = s.domains.last().expect("non-empty").domain;
                if domain <= last {
                    return Err(TraceError::Parse {
                        line,
                        reason: format!("domain {domain} not ascending within window {window}"),
                    });
                }
                s.domains.push(row);
            }
            Some(s) if window < s.window_index => {
                return Err(TraceError::Parse {
                    line,
                    reason: format!("window {window} not ascending"),
                });
            }
            _ => samples.push(WindowSample {
                window_index: window,
                domains: vec![row],
            }),
        }
    }

    if let Some(first) = samples.first() {
        let expected: Vec<DomainId> = first.domains.iter().map(|d| d.domain).collect();
        for s in &samples {
            let got: Vec<DomainId> = s.domains.iter().map(|d| d.domain).collect();
            if got != expected {
                return Err(TraceError::Parse {
                    line: 0,
                    reason: format!(
                        "window {} lists domains {got:?}, expected {expected:?}",
                        s.window_index
                    ),
                });
            }
        }
    }
    Ok(samples)
}

fn csv_err(e: csv::Error, line: u64) -> TraceError {
    let line = e.position().map(|p| p.line()).unwrap_or(line);
    TraceError::Parse {
        line,
        reason: e.to_string(),
    }
}
