//! Repeated-click filtering for pay-per-click accounting.
//!
//! A click whose source address already clicked the same destination inside
//! the statistics window is discarded only while the expected share of
//! genuine clicks lost to NAT address sharing, bounded by `½·C/A`, stays
//! under the operator's threshold.

pub mod click_ledger;
pub mod filter_engine;
pub mod net_registry;
pub mod poisson_model;
pub mod traffic_simulator;

pub use click_ledger::{ClickLedger, LedgerEntry, LedgerError, WindowConfig};
pub use filter_engine::{
    ClickCounters, ClickEvent, Decision, EngineConfig, EngineError, FilterEngine, Outcome, Reason,
};
pub use net_registry::{load_registry, NetRange, Registry, RegistryError};
pub use poisson_model::{Lambda, ModelError, ModelParams, Threshold};
pub use traffic_simulator::{
    AttackReport, AttackScenario, NatScenario, SamplingMode, SimError, SimReport,
};
