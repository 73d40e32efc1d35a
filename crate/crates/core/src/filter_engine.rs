//! Per-click accept/discard decision.
//!
//! For each click: resolve the source's network range and pool size `A`,
//! drop history older than the window, count the clicks `C` already retained
//! from that range to the same destination, and discard the click only when
//! the same source already clicked that destination and `½·C/A` is below the
//! threshold. Accepted clicks are billed and recorded; discarded clicks leave
//! no trace in the window.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::num::NonZeroU64;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::click_ledger::{ClickLedger, LedgerEntry, LedgerError, WindowConfig};
use crate::net_registry::{NetRange, Registry};
use crate::poisson_model::{self, ModelParams, Threshold};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("click rejected: {0}")]
    Backpressure(LedgerError),
    #[error("invalid click: {0}")]
    InvalidClick(LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub source: Ipv4Addr,
    pub dest: String,
    pub time: f64,
}

impl ClickEvent {
    pub fn new(source: Ipv4Addr, dest: impl Into<String>, time: f64) -> Result<Self, EngineError> {
        let click = Self {
            source,
            dest: dest.into(),
            time,
        };
        click.validate()?;
        Ok(click)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.dest.is_empty() {
            return Err(EngineError::InvalidClick(LedgerError::EmptyDest));
        }
        if !(self.time.is_finite() && self.time >= 0.0) {
            return Err(EngineError::InvalidClick(LedgerError::InvalidTime(self.time)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Accept,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    FirstFromSource,
    RepeatBelowThresholdDiscarded,
    RepeatAboveThresholdAccepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub reason: Reason,
    /// Clicks from the same range to the same destination already in the window.
    pub observed_c: u64,
    pub pool_size: u64,
    /// `0.5 * observed_c / pool_size` as evaluated for the decision.
    pub loss_bound: f64,
    pub net_id: String,
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        self.outcome == Outcome::Accept
    }
}

pub const DEFAULT_LEDGER_CAPACITY: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub window: WindowConfig,
    pub threshold: Threshold,
    /// Pool size assumed for addresses outside every registered range.
    pub fallback_pool_size: NonZeroU64,
    pub ledger_capacity: usize,
}

impl EngineConfig {
    pub fn new(window: WindowConfig, threshold: Threshold) -> Self {
        Self {
            window,
            threshold,
            fallback_pool_size: NonZeroU64::MIN,
            ledger_capacity: DEFAULT_LEDGER_CAPACITY,
        }
    }

    pub fn with_fallback_pool_size(mut self, size: NonZeroU64) -> Self {
        self.fallback_pool_size = size;
        self
    }

    pub fn with_ledger_capacity(mut self, capacity: usize) -> Self {
        self.ledger_capacity = capacity;
        self
    }
}

/// Accepted-click totals per destination.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClickCounters(HashMap<String, u64>);

impl ClickCounters {
    pub fn get(&self, dest: &str) -> u64 {
        self.0.get(dest).copied().unwrap_or(0)
    }

    fn increment(&mut self, dest: &str) {
        *self.0.entry(dest.to_owned()).or_insert(0) += 1;
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn snapshot(&self) -> HashMap<String, u64> {
        self.0.clone()
    }
}

/// Single-writer filter state. Callers that share an engine across threads
/// wrap it in a lock so that one click's evict/query/decide/record runs as a
/// unit.
#[derive(Debug, Clone)]
pub struct FilterEngine {
    config: EngineConfig,
    registry: Arc<Registry>,
    ledger: ClickLedger,
    counters: ClickCounters,
    // latest click time seen; eviction never moves backwards
    latest_time: f64,
}

impl FilterEngine {
    pub fn new(config: EngineConfig, registry: Arc<Registry>) -> Self {
        Self {
            ledger: ClickLedger::with_capacity(config.ledger_capacity),
            config,
            registry,
            counters: ClickCounters::default(),
            latest_time: f64::NEG_INFINITY,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn ledger(&self) -> &ClickLedger {
        &self.ledger
    }

    pub fn counters(&self) -> &ClickCounters {
        &self.counters
    }

    pub fn get_counter(&self, dest: &str) -> u64 {
        self.counters.get(dest)
    }

    /// Zeroes the billing counters. The statistics window is left intact.
    pub fn reset_counters(&mut self) {
        self.counters.clear();
    }

    /// Swaps in a new registry; clicks already handled are unaffected.
    pub fn replace_registry(&mut self, registry: Arc<Registry>) {
        self.registry = registry;
    }

    fn resolve(&self, ip: Ipv4Addr) -> NetRange {
        match self.registry.find(ip) {
            Some(range) => range.clone(),
            None => NetRange::with_pool_size(format!("host:{ip}"), ip, 32, self.config.fallback_pool_size)
                .expect("a /32 has no host bits"),
        }
    }

    pub fn handle_click(&mut self, click: &ClickEvent) -> Result<Decision, EngineError> {
        click.validate()?;

        let net = self.resolve(click.source);
        let pool_size = net.pool_size();
        let latest = self.latest_time.max(click.time);
        let cutoff = latest - self.config.window.seconds();

        // Look at the window as it will be after eviction, before touching
        // anything, so a rejected click leaves the engine unchanged.
        let view = WindowView::at(&self.ledger, cutoff, net.net_id(), click.source, &click.dest);

        let params = ModelParams::new(pool_size, view.net_dest as u64).expect("pool size is non-zero");
        let loss_bound = poisson_model::loss_upper_bound(&params);
        let repeat = view.source_dest > 0;
        let discard = repeat && poisson_model::should_discard_repeat(&params, self.config.threshold);

        let (outcome, reason) = match (repeat, discard) {
            (false, _) => (Outcome::Accept, Reason::FirstFromSource),
            (true, true) => (Outcome::Discard, Reason::RepeatBelowThresholdDiscarded),
            (true, false) => (Outcome::Accept, Reason::RepeatAboveThresholdAccepted),
        };

        if outcome == Outcome::Accept && self.ledger.len() - view.evictable >= self.ledger.capacity() {
            return Err(EngineError::Backpressure(LedgerError::CapacityExhausted {
                capacity: self.ledger.capacity(),
            }));
        }

        self.latest_time = latest;
        self.ledger.evict_before(cutoff);

        if outcome == Outcome::Accept {
            let entry = LedgerEntry::new(click.source, click.dest.clone(), net.net_id(), click.time)
                .map_err(EngineError::InvalidClick)?;
            self.ledger.record(entry).map_err(EngineError::Backpressure)?;
            self.counters.increment(&click.dest);
        }

        Ok(Decision {
            outcome,
            reason,
            observed_c: params.click_count(),
            pool_size,
            loss_bound,
            net_id: net.net_id().to_owned(),
        })
    }
}

struct WindowView {
    net_dest: usize,
    source_dest: usize,
    evictable: usize,
}

impl WindowView {
    fn at(ledger: &ClickLedger, cutoff: f64, net_id: &str, source: Ipv4Addr, dest: &str) -> Self {
        let mut view = Self {
            net_dest: ledger.count_net_dest(net_id, dest),
            source_dest: ledger.count_source_dest(source, dest),
            evictable: 0,
        };
        for row in ledger.iter().take_while(|row| row.time() < cutoff) {
            view.evictable += 1;
            if row.dest() == dest {
                if row.net_id() == net_id {
                    view.net_dest -= 1;
                }
                if row.source() == source {
                    view.source_dest -= 1;
                }
            }
        }
        view
    }
}
