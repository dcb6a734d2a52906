use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// A message to transmit over the covert channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitSource {
    pub bits: Vec<u8>,
    pub seed: Option<u64>,
}

impl BitSource {
    /// `len` uniformly random bits from `seed`.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        BitSource {
            bits: (0..len).map(|_| rng.gen_range(0..=1u8)).collect(),
            seed: Some(seed),
        }
    }

    pub fn from_bits(bits: Vec<u8>) -> Self {
        BitSource { bits, seed: None }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Fraction of positions where `decoded` matches `sent`.
///
/// Missing decoded positions count as errors.
pub fn decode_accuracy(sent: &[u8], decoded: &[u8]) -> Option<f64> {
    if sent.is_empty() {
        return None;
    }
    let matching = sent
        .iter()
        .zip(decoded)
        .filter(|(a, b)| a == b)
        .count();
    Some(matching as f64 / sent.len() as f64)
}
