#![allow(dead_code)]

use std::path::PathBuf;

use occuscan::experiment::ExperimentConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bundled(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Cross-correlation straight from the definition: for each lag, walk every
/// (i, j) pair and keep those with i - j == lag. Returns (gammas, degenerate).
pub fn oracle(x: &[f64], y: &[f64], max_lag: usize) -> (Vec<f64>, bool) {
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sx = (x.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / nf).sqrt();
    let sy = (y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / nf).sqrt();
    let degenerate = x.iter().all(|&v| v == x[0]) || y.iter().all(|&v| v == y[0]);
    let m = max_lag as i64;
    let gammas = (-m..=m)
        .map(|lag| {
            if degenerate {
                return 0.0;
            }
            let mut acc = 0.0;
            for i in 0..n as i64 {
                for j in 0..n as i64 {
                    if i - j == lag {
                        acc += (x[i as usize] - mx) * (y[j as usize] - my) / (sx * sy);
                    }
                }
            }
            (acc / nf).abs().min(1.0)
        })
        .collect();
    (gammas, degenerate)
}

/// Mixed-shape series: constants, small integers, square waves and wide noise.
pub fn random_series(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    match rng.gen_range(0..5) {
        0 => vec![rng.gen_range(-5.0..5.0); n],
        1 => (0..n).map(|_| rng.gen_range(-3i32..=3) as f64).collect(),
        2 => (0..n).map(|_| rng.gen_range(0.0..200.0)).collect(),
        3 => (0..n)
            .map(|i| if (i / 7) % 2 == 0 { 128.0 } else { -128.0 } + rng.gen_range(-1.0..1.0))
            .collect(),
        _ => (0..n).map(|_| rng.gen_range(-1e3..1e3)).collect(),
    }
}

/// Series lengths for oracle runs: a few long ones, mostly short.
pub fn oracle_case(rng: &mut ChaCha8Rng, case: usize) -> (usize, usize) {
    let n = match case {
        0 => 4096,
        1..=3 => rng.gen_range(1024..=2048),
        _ => rng.gen_range(2..=96),
    };
    let max_lag = if n > 1024 { rng.gen_range(0..=4) } else { rng.gen_range(0..n) };
    (n, max_lag)
}
