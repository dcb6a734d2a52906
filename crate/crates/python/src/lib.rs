//! Python bindings: the cache model, the correlation detector and whole
//! experiment runs driven by TOML config text.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use occuscan::detector::{self, DetectionVerdict};
use occuscan::experiment::{self, ChannelReport, DetectorSettings, ExperimentConfig};
use occuscan::telemetry;
use occuscan::{CacheGeometry, DomainId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A set-associative LRU cache shared by numbered domains.
#[pyclass(name = "Cache", module = "occuscan_py")]
struct PyCache {
    inner: occuscan::Cache,
}

#[pymethods]
impl PyCache {
    #[new]
    #[pyo3(signature = (domains, num_sets=1024, ways=8, line_size=64, hit_latency=20, miss_latency=100))]
    fn new(
        domains: Vec<u16>,
        num_sets: usize,
        ways: usize,
        line_size: u64,
        hit_latency: u64,
        miss_latency: u64,
    ) -> PyResult<Self> {
        let geometry = CacheGeometry {
            num_sets,
            ways,
            line_size,
            hit_latency,
            miss_latency,
        };
        let ids: Vec<DomainId> = domains.into_iter().map(DomainId).collect();
        let inner = occuscan::Cache::new(geometry, &ids).map_err(value_err)?;
        Ok(PyCache { inner })
    }

    /// Address of `local` inside the namespace of `domain`.
    #[staticmethod]
    fn address(domain: u16, local: u64) -> u64 {
        DomainId(domain).address(local)
    }

    /// Returns `(hit, latency, victim_domain)`.
    #[pyo3(signature = (domain, address, now=0))]
    fn access(&mut self, domain: u16, address: u64, now: u64) -> PyResult<(bool, u64, Option<u16>)> {
        let out = self
            .inner
            .access(DomainId(domain), address, now)
            .map_err(value_err)?;
        Ok((out.is_hit(), out.latency, out.eviction.map(|e| e.victim_domain.0)))
    }

    /// Returns whether a line was invalidated.
    fn flush(&mut self, domain: u16, address: u64) -> PyResult<bool> {
        self.inner.flush(DomainId(domain), address).map_err(value_err)
    }

    fn occupancy(&self, domain: u16) -> PyResult<u64> {
        self.inner.occupancy(DomainId(domain)).map_err(value_err)
    }

    fn misses(&self, domain: u16) -> PyResult<u64> {
        self.inner.misses(DomainId(domain)).map_err(value_err)
    }

    fn hits(&self, domain: u16) -> PyResult<u64> {
        self.inner.hits(DomainId(domain)).map_err(value_err)
    }

    fn flush_audit(&self, domain: u16) -> PyResult<u64> {
        self.inner.flush_audit(DomainId(domain)).map_err(value_err)
    }

    fn free_lines(&self) -> u64 {
        self.inner.free_lines()
    }

    fn capacity_lines(&self) -> u64 {
        self.inner.geometry().capacity_lines()
    }

    fn __repr__(&self) -> String {
        let g = self.inner.geometry();
        format!(
            "Cache(sets={}, ways={}, line_size={}, free={})",
            g.num_sets,
            g.ways,
            g.line_size,
            self.inner.free_lines()
        )
    }
}

/// Verdict for one domain pair on one channel.
#[pyclass(name = "Verdict", module = "occuscan_py", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyVerdict {
    domain_a: u16,
    domain_b: u16,
    channel: String,
    score: f64,
    lag: i64,
    flagged: bool,
    degenerate: bool,
}

#[pymethods]
impl PyVerdict {
    fn __repr__(&self) -> String {
        format!(
            "Verdict({}-{} {} score={:.4} lag={} flagged={})",
            self.domain_a, self.domain_b, self.channel, self.score, self.lag, self.flagged
        )
    }
}

impl From<&DetectionVerdict> for PyVerdict {
    fn from(v: &DetectionVerdict) -> Self {
        PyVerdict {
            domain_a: v.domain_pair.0 .0,
            domain_b: v.domain_pair.1 .0,
            channel: v.channel.name().to_string(),
            score: v.score,
            lag: v.lag,
            flagged: v.flagged,
            degenerate: v.degenerate,
        }
    }
}

fn flatten(channels: &[ChannelReport]) -> Vec<PyVerdict> {
    channels
        .iter()
        .flat_map(|c| c.verdicts.iter().map(PyVerdict::from))
        .collect()
}

/// Outcome of `run`.
#[pyclass(name = "RunResult", module = "occuscan_py", frozen, get_all)]
struct PyRunResult {
    name: String,
    windows: usize,
    domains: Vec<u16>,
    decode_accuracy: Option<f64>,
    bits_sent: Vec<u8>,
    bits_decoded: Vec<u8>,
    verdicts: Vec<PyVerdict>,
    traces_csv: String,
    resolved_config: String,
}

#[pymethods]
impl PyRunResult {
    fn __repr__(&self) -> String {
        format!(
            "RunResult(name={:?}, windows={}, domains={:?})",
            self.name, self.windows, self.domains
        )
    }
}

/// Biased normalized cross-correlation. Returns `(gammas, gamma_max, lag_at_max)`
/// with `gammas[i]` at lag `i - max_lag`.
#[pyfunction]
#[pyo3(signature = (x, y, max_lag=None))]
fn cross_correlation(x: Vec<f64>, y: Vec<f64>, max_lag: Option<usize>) -> PyResult<(Vec<f64>, f64, i64)> {
    let m = max_lag.unwrap_or_else(|| detector::default_max_lag(x.len()));
    let r = detector::cross_correlation(&x, &y, m).map_err(value_err)?;
    Ok((r.gammas, r.gamma_max, r.lag_at_max))
}

#[pyfunction]
fn gain_loss_filter(a: Vec<f64>, b: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    detector::gain_loss_filter(&a, &b).map_err(value_err)
}

/// Runs an experiment from config text and analyzes it.
#[pyfunction]
fn run(py: Python<'_>, config_toml: &str) -> PyResult<PyRunResult> {
    let config = ExperimentConfig::from_toml(config_toml, "<string>").map_err(value_err)?;
    let (result, report) = py
        .detach(|| experiment::run_experiment(&config))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyRunResult {
        name: report.name.clone(),
        windows: report.windows,
        domains: report.domains.iter().map(|d| d.0).collect(),
        decode_accuracy: report.decode_accuracy,
        bits_sent: result.bits_sent.clone(),
        bits_decoded: result.bits_decoded.clone(),
        verdicts: flatten(&report.channels),
        traces_csv: telemetry::traces_to_string(&result.samples),
        resolved_config: report.config.to_toml(),
    })
}

/// Re-analyzes trace CSV text.
#[pyfunction]
#[pyo3(signature = (traces_csv, channel="both", threshold=detector::DEFAULT_THRESHOLD, max_lag=None))]
fn detect(traces_csv: &str, channel: &str, threshold: f64, max_lag: Option<usize>) -> PyResult<Vec<PyVerdict>> {
    let samples = telemetry::read_traces(traces_csv.as_bytes(), None).map_err(value_err)?;
    let settings = DetectorSettings {
        threshold,
        max_lag,
        channels: channel.parse().map_err(value_err)?,
        ..DetectorSettings::default()
    };
    let reports = experiment::analyze(&samples, &settings).map_err(value_err)?;
    Ok(flatten(&reports))
}

#[pymodule]
fn occuscan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCache>()?;
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(cross_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(gain_loss_filter, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add("DEFAULT_THRESHOLD", detector::DEFAULT_THRESHOLD)?;
    Ok(())
}
