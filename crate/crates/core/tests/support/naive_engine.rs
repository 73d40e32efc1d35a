//! Linear-scan reference for the click filter. Shares no code with the
//! engine beyond the public event and decision types.

#![allow(dead_code)]

use std::collections::HashMap;
use std::net::Ipv4Addr;

use clickshield_core::{ClickEvent, Decision, Outcome, Reason};

#[derive(Debug, Clone)]
pub struct NaiveRange {
    pub base: u32,
    pub prefix_len: u8,
    pub net_id: String,
    pub pool_size: u64,
}

impl NaiveRange {
    fn contains(&self, ip: u32) -> bool {
        let shift = 32 - self.prefix_len as u32;
        if shift == 32 {
            return true;
        }
        (ip >> shift) == (self.base >> shift)
    }
}

/// Parses `CIDR,net_id[,pool_size]` rows without validation.
pub fn parse_ranges(src: &str) -> Vec<NaiveRange> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let (addr, len) = f[0].split_once('/').unwrap();
            let prefix_len: u8 = len.parse().unwrap();
            let pool_size = match f.get(2) {
                Some(p) => p.parse().unwrap(),
                None => 2u64.pow(32 - prefix_len as u32),
            };
            NaiveRange {
                base: u32::from(addr.parse::<Ipv4Addr>().unwrap()),
                prefix_len,
                net_id: f[1].to_string(),
                pool_size,
            }
        })
        .collect()
}

pub fn naive_lookup(ranges: &[NaiveRange], ip: Ipv4Addr, fallback: u64) -> (String, u64) {
    let addr = u32::from(ip);
    let mut best: Option<&NaiveRange> = None;
    for r in ranges {
        if r.contains(addr) && best.is_none_or(|b| r.prefix_len > b.prefix_len) {
            best = Some(r);
        }
    }
    match best {
        Some(r) => (r.net_id.clone(), r.pool_size),
        None => (format!("host:{ip}"), fallback),
    }
}

struct Row {
    source: Ipv4Addr,
    dest: String,
    net: String,
    time: f64,
}

pub struct NaiveEngine {
    ranges: Vec<NaiveRange>,
    fallback: u64,
    window: f64,
    threshold: f64,
    table: Vec<Row>,
    latest: Option<f64>,
    pub counters: HashMap<String, u64>,
}

impl NaiveEngine {
    pub fn new(registry_src: &str, fallback: u64, window: f64, threshold: f64) -> Self {
        Self {
            ranges: parse_ranges(registry_src),
            fallback,
            window,
            threshold,
            table: Vec::new(),
            latest: None,
            counters: HashMap::new(),
        }
    }

    pub fn handle(&mut self, click: &ClickEvent) -> Decision {
        let (net, a) = naive_lookup(&self.ranges, click.source, self.fallback);
        let latest = match self.latest {
            Some(t) if t > click.time => t,
            _ => click.time,
        };
        self.latest = Some(latest);
        let cutoff = latest - self.window;
        self.table.retain(|r| !(r.time < cutoff));

        let c = self
            .table
            .iter()
            .filter(|r| r.dest == click.dest && r.net == net)
            .count() as u64;
        let prior = self
            .table
            .iter()
            .filter(|r| r.dest == click.dest && r.source == click.source)
            .count();
        let bound = 0.5 * c as f64 / a as f64;

        if prior > 0 && bound < self.threshold {
            return Decision {
                outcome: Outcome::Discard,
                reason: Reason::RepeatBelowThresholdDiscarded,
                observed_c: c,
                pool_size: a,
                loss_bound: bound,
                net_id: net,
            };
        }
        *self.counters.entry(click.dest.clone()).or_insert(0) += 1;
        self.table.push(Row {
            source: click.source,
            dest: click.dest.clone(),
            net: net.clone(),
            time: click.time,
        });
        Decision {
            outcome: Outcome::Accept,
            reason: if prior > 0 {
                Reason::RepeatAboveThresholdAccepted
            } else {
                Reason::FirstFromSource
            },
            observed_c: c,
            pool_size: a,
            loss_bound: bound,
            net_id: net,
        }
    }
}
