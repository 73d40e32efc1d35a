//! Sliding window of accepted clicks (the status table).
//!
//! Rows are kept in time order for eviction and mirrored into two count
//! indexes, one per `(net_id, dest)` and one per `(source, dest)`, so every
//! query the filter performs is a hash lookup.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("ledger is full ({capacity} entries)")]
    CapacityExhausted { capacity: usize },
    #[error("timestamp must be finite and non-negative, got {0}")]
    InvalidTime(f64),
    #[error("destination must not be empty")]
    EmptyDest,
    #[error("window length must be positive and finite, got {0}")]
    InvalidWindow(f64),
}

/// One accepted click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    source: Ipv4Addr,
    dest: String,
    net_id: String,
    time: f64,
}

impl LedgerEntry {
    pub fn new(
        source: Ipv4Addr,
        dest: impl Into<String>,
        net_id: impl Into<String>,
        time: f64,
    ) -> Result<Self, LedgerError> {
        let dest = dest.into();
        if dest.is_empty() {
            return Err(LedgerError::EmptyDest);
        }
        if !(time.is_finite() && time >= 0.0) {
            return Err(LedgerError::InvalidTime(time));
        }
        Ok(Self {
            source,
            dest,
            net_id: net_id.into(),
            time,
        })
    }

    pub fn source(&self) -> Ipv4Addr {
        self.source
    }

    pub fn dest(&self) -> &str {
        &self.dest
    }

    pub fn net_id(&self) -> &str {
        &self.net_id
    }

    pub fn time(&self) -> f64 {
        self.time
    }
}

/// Length `T` of the statistics window in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WindowConfig(f64);

impl WindowConfig {
    pub fn new(window_seconds: f64) -> Result<Self, LedgerError> {
        if window_seconds.is_finite() && window_seconds > 0.0 {
            Ok(Self(window_seconds))
        } else {
            Err(LedgerError::InvalidWindow(window_seconds))
        }
    }

    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for WindowConfig {
    type Error = LedgerError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<WindowConfig> for f64 {
    fn from(w: WindowConfig) -> f64 {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeKey(f64);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type PairCounts<K> = HashMap<K, HashMap<String, usize>>;

fn bump<K: Eq + std::hash::Hash>(counts: &mut PairCounts<K>, key: K, dest: &str) {
    *counts
        .entry(key)
        .or_default()
        .entry(dest.to_owned())
        .or_insert(0) += 1;
}

fn drop_one<K: Eq + std::hash::Hash>(counts: &mut PairCounts<K>, key: &K, dest: &str) {
    let Some(inner) = counts.get_mut(key) else {
        return;
    };
    if let Some(n) = inner.get_mut(dest) {
        *n -= 1;
        if *n == 0 {
            inner.remove(dest);
        }
    }
    if inner.is_empty() {
        counts.remove(key);
    }
}

fn lookup<K: Eq + std::hash::Hash>(counts: &PairCounts<K>, key: &K, dest: &str) -> usize {
    counts
        .get(key)
        .and_then(|inner| inner.get(dest))
        .copied()
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct ClickLedger {
    rows: BTreeMap<(TimeKey, u64), LedgerEntry>,
    net_dest: PairCounts<String>,
    source_dest: PairCounts<Ipv4Addr>,
    next_row: u64,
    capacity: usize,
}

impl Default for ClickLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl ClickLedger {
    pub fn new() -> Self {
        Self::with_capacity(usize::MAX)
    }

    /// A ledger that refuses to hold more than `capacity` rows.
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            net_dest: HashMap::new(),
            source_dest: HashMap::new(),
            next_row: 0,
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() >= self.capacity
    }

    /// Removes every row with `time < cutoff` and returns how many went.
    pub fn evict_before(&mut self, cutoff: f64) -> usize {
        let mut removed = 0;
        while let Some(entry) = self.rows.first_entry() {
            if entry.key().0 .0 >= cutoff {
                break;
            }
            let row = entry.remove();
            drop_one(&mut self.net_dest, &row.net_id, &row.dest);
            drop_one(&mut self.source_dest, &row.source, &row.dest);
            removed += 1;
        }
        removed
    }

    /// Number of rows `evict_before(cutoff)` would remove, without removing them.
    pub fn count_before(&self, cutoff: f64) -> usize {
        self.rows
            .keys()
            .take_while(|(t, _)| t.0 < cutoff)
            .count()
    }

    pub fn count_net_dest(&self, net_id: &str, dest: &str) -> usize {
        self.net_dest
            .get(net_id)
            .and_then(|inner| inner.get(dest))
            .copied()
            .unwrap_or(0)
    }

    pub fn count_source_dest(&self, source: Ipv4Addr, dest: &str) -> usize {
        lookup(&self.source_dest, &source, dest)
    }

    pub fn has_prior(&self, source: Ipv4Addr, dest: &str) -> bool {
        self.count_source_dest(source, dest) > 0
    }

    /// Stores a row. Identical rows are kept as separate entries.
    pub fn record(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        if self.is_full() {
            return Err(LedgerError::CapacityExhausted {
                capacity: self.capacity,
            });
        }
        bump(&mut self.net_dest, entry.net_id.clone(), &entry.dest);
        bump(&mut self.source_dest, entry.source, &entry.dest);
        self.rows.insert((TimeKey(entry.time), self.next_row), entry);
        self.next_row += 1;
        Ok(())
    }

    /// Retained rows in time order.
    pub fn iter(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.rows.values()
    }
}
