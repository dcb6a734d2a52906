//! Seeded access-stream drivers: the covert-channel trojan and spy, benign
//! generators, and the scenario event loop that interleaves them.

pub mod attack;
pub mod benign;
pub mod bits;
pub mod scenario;

pub use attack::{AttackChannel, AttackConfig, Protocol, SpyDriver, TrojanDriver};
pub use benign::{benign_step, BenignConfig, BenignDriver, BenignKind};
pub use bits::{decode_accuracy, BitSource};
pub use scenario::{run_scenario, ScenarioConfig, ScenarioResult, DEFAULT_WINDOW};
