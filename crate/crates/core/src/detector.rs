//! Pairwise timing-channel detection.
//!
//! The score for a pair of traces is the maximum over lags of the absolute
//! normalized cross-correlation
//!
//! ```text
//! gamma(tau) = | 1/N * sum_n (x(n) - mean_x) * (y(n - tau) - mean_y) / (sd_x * sd_y) |
//! ```
//!
//! with population means and standard deviations over the full series, and
//! terms outside the overlap contributing zero (the sum is always divided by
//! the full length `N`).
//!
//! Occupancy deltas are first passed through the gain-loss filter: windows
//! in which both domains gained, or both lost, lines cannot come from mutual
//! evictions between the two and are zeroed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::DomainId;
use crate::error::DetectError;
use crate::telemetry::{DomainTrace, TraceKind};

pub const DEFAULT_THRESHOLD: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub max_lag: usize,
    /// `gammas[i]` is gamma at lag `i - max_lag`.
    pub gammas: Vec<f64>,
    pub gamma_max: f64,
    pub lag_at_max: i64,
    pub degenerate: bool,
}

impl CorrelationResult {
    pub fn gamma_at(&self, lag: i64) -> Option<f64> {
        let idx = lag + self.max_lag as i64;
        usize::try_from(idx).ok().and_then(|i| self.gammas.get(i)).copied()
    }

    pub fn lags(&self) -> impl Iterator<Item = i64> + '_ {
        let m = self.max_lag as i64;
        -m..=m
    }
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let sd = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (c, sd)
}

/// Normalized cross-correlation for every lag in `-max_lag..=max_lag`.
pub fn cross_correlation(
    x: &[f64],
    y: &[f64],
    max_lag: usize,
) -> Result<CorrelationResult, DetectError> {
    if x.len() != y.len() {
        return Err(DetectError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(DetectError::TooShort(n));
    }
    if max_lag >= n {
        return Err(DetectError::LagOutOfRange { max_lag, len: n });
    }

    let width = 2 * max_lag + 1;
    let degenerate = is_constant(x) || is_constant(y);
    let mut gammas = vec![0.0; width];
    if !degenerate {
        let (cx, sx) = centered(x);
        let (cy, sy) = centered(y);
        let norm = sx * sy;
        if norm > 0.0 {
            for (slot, g) in gammas.iter_mut().enumerate() {
                let lag = slot as i64 - max_lag as i64;
                // Pairs (i, j) with i - j = lag, walked in ascending i.
                let (xs, ys) = if lag >= 0 {
                    let l = lag as usize;
                    (&cx[l..], &cy[..n - l])
                } else {
                    let l = (-lag) as usize;
                    (&cx[..n - l], &cy[l..])
                };
                let s: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
                *g = (s / norm / n as f64).abs().min(1.0);
            }
        }
    }

    let (lag_at_max, gamma_max) = peak(&gammas, max_lag);
    Ok(CorrelationResult {
        max_lag,
        gammas,
        gamma_max,
        lag_at_max,
        degenerate,
    })
}

/// Maximum gamma and its lag; ties go to the smallest |lag|, negative first.
fn peak(gammas: &[f64], max_lag: usize) -> (i64, f64) {
    let m = max_lag as i64;
    let mut best = (0i64, gammas[max_lag]);
    for k in 1..=m {
        for lag in [-k, k] {
            let g = gammas[(lag + m) as usize];
            if g > best.1 {
                best = (lag, g);
            }
        }
    }
    best
}

/// Zeroes every window where both deltas share a sign.
pub fn gain_loss_filter(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DetectError> {
    if a.len() != b.len() {
        return Err(DetectError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| if x * y > 0.0 { (0.0, 0.0) } else { (x, y) })
        .unzip())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    OccupancyDelta,
    OccupancyLevel,
    MissCount,
}

impl Channel {
    pub fn trace_kind(self) -> TraceKind {
        match self {
            Channel::OccupancyDelta => TraceKind::OccupancyDelta,
            Channel::OccupancyLevel => TraceKind::OccupancyLevel,
            Channel::MissCount => TraceKind::MissCount,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::OccupancyDelta => "occupancy-delta",
            Channel::OccupancyLevel => "occupancy-level",
            Channel::MissCount => "miss-count",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub domain_pair: (DomainId, DomainId),
    pub channel: Channel,
    pub score: f64,
    pub lag: i64,
    pub flagged: bool,
    pub degenerate: bool,
    pub threshold: f64,
}

/// Default lag range for series of length `n`.
pub fn default_max_lag(n: usize) -> usize {
    n / 4
}

/// Correlates the two traces for `channel`, returning the full lag profile.
pub fn correlate_pair(
    a: &DomainTrace,
    b: &DomainTrace,
    channel: Channel,
    max_lag: Option<usize>,
) -> Result<CorrelationResult, DetectError> {
    if a.kind != b.kind {
        return Err(DetectError::KindMismatch(a.kind, b.kind));
    }
    if a.kind != channel.trace_kind() {
        return Err(DetectError::KindMismatch(a.kind, channel.trace_kind()));
    }
    let max_lag = max_lag.unwrap_or_else(|| default_max_lag(a.values.len()));
    match channel {
        Channel::OccupancyDelta => {
            let (fa, fb) = gain_loss_filter(&a.values, &b.values)?;
            cross_correlation(&fa, &fb, max_lag)
        }
        Channel::OccupancyLevel | Channel::MissCount => {
            cross_correlation(&a.values, &b.values, max_lag)
        }
    }
}

pub fn detect_pair(
    a: &DomainTrace,
    b: &DomainTrace,
    channel: Channel,
    threshold: f64,
    max_lag: Option<usize>,
) -> Result<DetectionVerdict, DetectError> {
    let r = correlate_pair(a, b, channel, max_lag)?;
    Ok(DetectionVerdict {
        domain_pair: (a.domain, b.domain),
        channel,
        score: r.gamma_max,
        lag: r.lag_at_max,
        flagged: !r.degenerate && r.gamma_max >= threshold,
        degenerate: r.degenerate,
        threshold,
    })
}

/// One verdict per unordered pair, in canonical (ascending id) pair order.
pub fn pairwise_scan(
    traces: &[DomainTrace],
    channel: Channel,
    threshold: f64,
    max_lag: Option<usize>,
) -> Result<Vec<DetectionVerdict>, DetectError> {
    if traces.len() < 2 {
        return Err(DetectError::TooFewDomains(traces.len()));
    }
    let mut sorted: Vec<&DomainTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| t.domain);
    let pairs: Vec<(usize, usize)> = (0..sorted.len())
        .flat_map(|i| (i + 1..sorted.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| detect_pair(sorted[i], sorted[j], channel, threshold, max_lag))
        .collect()
}

/// Runs [`pairwise_scan`] on consecutive epochs of `epoch_windows` windows.
/// A trailing partial epoch shorter than 2 windows is dropped.
pub fn epoch_scan(
    traces: &[DomainTrace],
    channel: Channel,
    threshold: f64,
    max_lag: Option<usize>,
    epoch_windows: usize,
) -> Result<Vec<Vec<DetectionVerdict>>, DetectError> {
    let len = traces.first().map_or(0, |t| t.values.len());
    let epoch_windows = epoch_windows.max(2);
    (0..len)
        .step_by(epoch_windows)
        .map(|start| (start, (start + epoch_windows).min(len)))
        .filter(|(s, e)| e - s >= 2)
        .map(|(s, e)| {
            let sliced: Vec<DomainTrace> = traces
                .iter()
                .map(|t| DomainTrace {
                    domain: t.domain,
                    kind: t.kind,
                    values: t.values[s..e].to_vec(),
                })
                .collect();
            let lag = max_lag.map(|m| m.min(e - s - 1));
            pairwise_scan(&sliced, channel, threshold, lag)
        })
        .collect()
}
