//! Monte Carlo checks of the repeated-click model.
//!
//! `run_nat_scenario` spreads users over a NAT pool, lets a subset click once
//! each, and measures how many clicks shared an address with an earlier one.
//! `run_attack_scenario` replays a synthetic single-address click flood,
//! optionally mixed with benign clicks from the same range, through a fresh
//! [`FilterEngine`].
//!
//! Randomness comes from ChaCha8 keyed with `seed_from_u64(seed)`; run `i`
//! of a scenario uses stream `i` of that key, so every run is reproducible on
//! its own and results do not depend on thread scheduling.

use std::net::Ipv4Addr;
use std::num::NonZeroU64;
use std::sync::Arc;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter_engine::{ClickEvent, Decision, EngineConfig, EngineError, FilterEngine, Outcome};
use crate::net_registry::{NetRange, Registry};
use crate::poisson_model::{self, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Generator for run `run_index` of a scenario seeded with `seed`.
pub fn run_rng(seed: u64, run_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatScenario {
    pub pool_size: u64,
    pub user_count: u64,
    pub clicker_count: u64,
    pub runs: u64,
    pub seed: u64,
}

impl NatScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidScenario(msg.to_owned()));
        if self.pool_size == 0 {
            return bad("pool_size must be positive");
        }
        if self.user_count == 0 || self.clicker_count == 0 {
            return bad("user_count and clicker_count must be positive");
        }
        if self.clicker_count > self.user_count {
            return bad("clicker_count cannot exceed user_count");
        }
        if self.runs == 0 {
            return bad("runs must be positive");
        }
        Ok(())
    }
}

/// How clicked addresses are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Draw one uniform address per clicker. Clickers are distinct users with
    /// i.i.d. uniform addresses, so this has the same distribution as the
    /// materialized path at O(clickers) cost.
    #[default]
    Direct,
    /// Assign every user an address, then pick the clickers without
    /// replacement. O(users) memory; meant for small instances.
    MaterializeUsers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSample {
    pub run_index: u64,
    /// Clicks minus distinct clicked addresses.
    pub repeated_clicks: u64,
    /// Addresses that originated two or more clicks.
    pub multi_click_addresses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: NatScenario,
    pub mode: SamplingMode,
    pub mean_repeated_fraction: f64,
    pub std_error: f64,
    pub model_loss_factor: f64,
    pub model_upper_bound: f64,
    pub abs_difference: f64,
    /// Mean share of the pool that originated two or more clicks.
    pub mean_address_fraction: f64,
    pub runs_completed: u64,
    #[serde(skip)]
    pub samples: Vec<RunSample>,
}

impl SimReport {
    pub fn repeated_fraction(&self, sample: &RunSample) -> f64 {
        sample.repeated_clicks as f64 / self.scenario.clicker_count as f64
    }
}

pub fn run_nat_scenario(scenario: &NatScenario) -> Result<SimReport, SimError> {
    run_nat_scenario_with(scenario, SamplingMode::Direct)
}

pub fn run_nat_scenario_with(scenario: &NatScenario, mode: SamplingMode) -> Result<SimReport, SimError> {
    scenario.validate()?;
    if mode == SamplingMode::MaterializeUsers && usize::try_from(scenario.user_count).is_err() {
        return Err(SimError::InvalidScenario("user_count too large to materialize".into()));
    }

    let samples: Vec<RunSample> = (0..scenario.runs)
        .into_par_iter()
        .map(|run_index| {
            let mut rng = run_rng(scenario.seed, run_index);
            let mut addresses = match mode {
                SamplingMode::Direct => sample_direct(scenario, &mut rng),
                SamplingMode::MaterializeUsers => sample_materialized(scenario, &mut rng),
            };
            let (distinct, multi) = tally(&mut addresses);
            RunSample {
                run_index,
                repeated_clicks: scenario.clicker_count - distinct,
                multi_click_addresses: multi,
            }
        })
        .collect();

    Ok(summarize(*scenario, mode, samples))
}

fn sample_direct(s: &NatScenario, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let pool = Uniform::new(0, s.pool_size).expect("pool is non-empty");
    pool.sample_iter(rng).take(s.clicker_count as usize).collect()
}

fn sample_materialized(s: &NatScenario, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let pool = Uniform::new(0, s.pool_size).expect("pool is non-empty");
    let users: Vec<u64> = (0..s.user_count).map(|_| pool.sample(rng)).collect();
    rand::seq::index::sample(rng, users.len(), s.clicker_count as usize)
        .into_iter()
        .map(|u| users[u])
        .collect()
}

// (distinct addresses, addresses hit at least twice)
fn tally(addresses: &mut [u64]) -> (u64, u64) {
    addresses.sort_unstable();
    let mut distinct = 0;
    let mut multi = 0;
    for group in addresses.chunk_by(|a, b| a == b) {
        distinct += 1;
        if group.len() > 1 {
            multi += 1;
        }
    }
    (distinct, multi)
}

fn summarize(scenario: NatScenario, mode: SamplingMode, samples: Vec<RunSample>) -> SimReport {
    let n = samples.len() as u64;
    let clicks = scenario.clicker_count;
    // integer accumulation keeps the reduction exact and order-independent
    let sum: u128 = samples.iter().map(|s| s.repeated_clicks as u128).sum();
    let sum_sq: u128 = samples
        .iter()
        .map(|s| (s.repeated_clicks as u128).pow(2))
        .sum();
    let multi_sum: u128 = samples.iter().map(|s| s.multi_click_addresses as u128).sum();

    let mean = sum as f64 / (n as f64 * clicks as f64);
    let std_error = if n > 1 {
        // n·Σr² − (Σr)² is exact in integers
        let spread = (n as u128 * sum_sq - sum * sum) as f64;
        let var_counts = spread / (n as f64 * (n - 1) as f64);
        (var_counts / n as f64).sqrt() / clicks as f64
    } else {
        0.0
    };

    let params = ModelParams::new(scenario.pool_size, clicks).expect("validated");
    let model_loss_factor = poisson_model::loss_factor(&params).expect("clicker_count >= 1");
    let model_upper_bound = poisson_model::loss_upper_bound(&params);

    SimReport {
        scenario,
        mode,
        mean_repeated_fraction: mean,
        std_error,
        model_loss_factor,
        model_upper_bound,
        abs_difference: (mean - model_upper_bound).abs(),
        mean_address_fraction: multi_sum as f64 / (n as f64 * scenario.pool_size as f64),
        runs_completed: n,
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelComparison {
    pub abs_difference: f64,
    pub within_tolerance: bool,
}

/// Distance between the simulated repeated-click fraction and `½·C/A`.
pub fn compare_with_model(report: &SimReport, tolerance: f64) -> ModelComparison {
    compare_values(report.mean_repeated_fraction, report.model_upper_bound, tolerance)
}

pub fn compare_values(mean: f64, upper_bound: f64, tolerance: f64) -> ModelComparison {
    let abs_difference = (mean - upper_bound).abs();
    ModelComparison {
        abs_difference,
        within_tolerance: abs_difference <= tolerance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub attacker_ip: Ipv4Addr,
    pub dest: String,
    pub n_clicks: u64,
    pub mean_interval_seconds: f64,
    /// 0 gives perfectly regular spacing, 1 gives exponential gaps; values in
    /// between blend the two while keeping the mean gap unchanged.
    pub interval_jitter: f64,
    /// Benign clicks per second from other hosts in the attacker's range.
    pub background_rate: f64,
    pub start_time: f64,
    pub seed: u64,
}

impl AttackScenario {
    pub fn new(attacker_ip: Ipv4Addr, dest: impl Into<String>, n_clicks: u64, seed: u64) -> Self {
        Self {
            attacker_ip,
            dest: dest.into(),
            n_clicks,
            mean_interval_seconds: 1200.0,
            interval_jitter: 1.0,
            background_rate: 0.0,
            start_time: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidScenario(msg.to_owned()));
        if self.n_clicks == 0 {
            return bad("n_clicks must be at least 1");
        }
        if self.dest.is_empty() {
            return bad("dest must not be empty");
        }
        if !(self.mean_interval_seconds.is_finite() && self.mean_interval_seconds > 0.0) {
            return bad("mean_interval_seconds must be positive");
        }
        if !(0.0..=1.0).contains(&self.interval_jitter) {
            return bad("interval_jitter must lie in [0, 1]");
        }
        if !(self.background_rate.is_finite() && self.background_rate >= 0.0) {
            return bad("background_rate must be non-negative");
        }
        if !(self.start_time.is_finite() && self.start_time >= 0.0) {
            return bad("start_time must be non-negative");
        }
        Ok(())
    }

    /// A registry holding only the attacker's /24, with pool size `pool_size`.
    pub fn single_net_registry(&self, pool_size: NonZeroU64) -> Registry {
        let base = Ipv4Addr::from(u32::from(self.attacker_ip) & 0xffff_ff00);
        let mut registry = Registry::empty(NonZeroU64::MIN);
        let range = NetRange::with_pool_size("attacker-net", base, 24, pool_size).expect("masked base");
        registry.insert(range).expect("empty registry");
        registry
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub from_attacker: bool,
    pub click: ClickEvent,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub accepted: u64,
    pub discarded: u64,
    pub attacker_accepted: u64,
    pub attacker_discarded: u64,
    pub trace: Vec<TraceEntry>,
}

/// Synthesizes the attack stream and feeds it, in time order, to a fresh engine.
pub fn run_attack_scenario(
    scenario: &AttackScenario,
    config: EngineConfig,
    registry: Arc<Registry>,
) -> Result<AttackReport, SimError> {
    scenario.validate()?;
    let net = registry.find(scenario.attacker_ip).cloned().ok_or_else(|| {
        SimError::InvalidScenario(format!("no registered range contains {}", scenario.attacker_ip))
    })?;
    if scenario.background_rate > 0.0 && net.prefix_len() == 32 {
        return Err(SimError::InvalidScenario(
            "background traffic needs a range with more than one host".into(),
        ));
    }

    let mut attack_rng = run_rng(scenario.seed, 0);
    let mut background_rng = run_rng(scenario.seed, 1);

    let mut events: Vec<(f64, bool, Ipv4Addr)> = Vec::with_capacity(scenario.n_clicks as usize);
    let mut t = scenario.start_time;
    for i in 0..scenario.n_clicks {
        if i > 0 {
            let exp: f64 = Exp1.sample(&mut attack_rng);
            let j = scenario.interval_jitter;
            t += scenario.mean_interval_seconds * ((1.0 - j) + j * exp);
        }
        events.push((t, true, scenario.attacker_ip));
    }
    let end = t;

    if scenario.background_rate > 0.0 {
        let span = 1u64 << (32 - net.prefix_len());
        let base = u32::from(net.base()) as u64;
        let mut bt = scenario.start_time;
        loop {
            let exp: f64 = Exp1.sample(&mut background_rng);
            bt += exp / scenario.background_rate;
            if bt > end {
                break;
            }
            let source = loop {
                let candidate = Ipv4Addr::from((base + background_rng.random_range(0..span)) as u32);
                if candidate != scenario.attacker_ip {
                    break candidate;
                }
            };
            events.push((bt, false, source));
        }
    }
    // stable: attacker clicks stay ahead of background clicks at equal times
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut engine = FilterEngine::new(config, registry);
    let mut report = AttackReport {
        accepted: 0,
        discarded: 0,
        attacker_accepted: 0,
        attacker_discarded: 0,
        trace: Vec::with_capacity(events.len()),
    };
    for (seq, (time, from_attacker, source)) in events.into_iter().enumerate() {
        let click = ClickEvent::new(source, scenario.dest.clone(), time)?;
        let decision = engine.handle_click(&click)?;
        match (decision.outcome, from_attacker) {
            (Outcome::Accept, true) => report.attacker_accepted += 1,
            (Outcome::Discard, true) => report.attacker_discarded += 1,
            _ => {}
        }
        match decision.outcome {
            Outcome::Accept => report.accepted += 1,
            Outcome::Discard => report.discarded += 1,
        }
        report.trace.push(TraceEntry {
            seq: seq as u64,
            from_attacker,
            click,
            decision,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::click_ledger::WindowConfig;
    use crate::poisson_model::Threshold;

    fn nat(pool: u64, users: u64, clickers: u64, runs: u64, seed: u64) -> NatScenario {
        NatScenario {
            pool_size: pool,
            user_count: users,
            clicker_count: clickers,
            runs,
            seed,
        }
    }

    #[test]
    fn degenerate_pool_repeats_everything_but_one() {
        for mode in [SamplingMode::Direct, SamplingMode::MaterializeUsers] {
            let r = run_nat_scenario_with(&nat(1, 10, 5, 3, 9), mode).unwrap();
            assert_eq!(r.mean_repeated_fraction, 0.8);
            assert_eq!(r.std_error, 0.0);
            assert_eq!(r.mean_address_fraction, 1.0);
        }
    }

    #[test]
    fn single_click_never_repeats() {
        let r = run_nat_scenario(&nat(1_000_000, 1_000_000, 1, 10, 3)).unwrap();
        assert_eq!(r.mean_repeated_fraction, 0.0);
        assert_eq!(r.runs_completed, 10);
        assert_eq!(r.samples.len(), 10);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = nat(50, 1000, 40, 200, 17);
        assert_eq!(run_nat_scenario(&s).unwrap(), run_nat_scenario(&s).unwrap());
        let other = run_nat_scenario(&NatScenario { seed: 18, ..s }).unwrap();
        assert_ne!(run_nat_scenario(&s).unwrap().samples, other.samples);
    }

    #[test]
    fn invalid_scenarios() {
        assert!(run_nat_scenario(&nat(0, 10, 5, 1, 0)).is_err());
        assert!(run_nat_scenario(&nat(10, 4, 5, 1, 0)).is_err());
        assert!(run_nat_scenario(&nat(10, 10, 0, 1, 0)).is_err());
        assert!(run_nat_scenario(&nat(10, 10, 5, 0, 0)).is_err());
    }

    #[test]
    fn comparison_examples() {
        let c = compare_values(2.5368e-3, 2.6065e-3, 1e-4);
        assert!((c.abs_difference - 6.97e-5).abs() < 1e-12);
        assert!(c.within_tolerance);
        assert_eq!(compare_values(0.3, 0.3, 0.0).abs_difference, 0.0);
        assert_eq!(compare_values(0.0, 0.0, 0.0).abs_difference, 0.0);
        assert!(!compare_values(0.0, 1e-3, 1e-4).within_tolerance);
    }

    #[test]
    fn tally_counts_groups() {
        let mut v = vec![3, 1, 3, 2, 3, 1];
        assert_eq!(tally(&mut v), (3, 2));
        assert_eq!(tally(&mut []), (0, 0));
    }

    fn attack_config(window: f64) -> EngineConfig {
        EngineConfig::new(WindowConfig::new(window).unwrap(), Threshold::new(0.01).unwrap())
    }

    #[test]
    fn lone_attacker_gets_one_click() {
        let mut s = AttackScenario::new("203.0.113.7".parse().unwrap(), "/ad", 41, 5);
        let reg = Arc::new(s.single_net_registry(NonZeroU64::new(256).unwrap()));
        let r = run_attack_scenario(&s, attack_config(1e9), reg.clone()).unwrap();
        assert_eq!((r.accepted, r.discarded), (1, 40));

        s.n_clicks = 1;
        let r = run_attack_scenario(&s, attack_config(1e9), reg).unwrap();
        assert_eq!((r.accepted, r.discarded), (1, 0));
    }

    #[test]
    fn background_from_same_net_is_mixed_in() {
        let mut s = AttackScenario::new("203.0.113.7".parse().unwrap(), "/ad", 20, 11);
        s.background_rate = 1.0 / 600.0;
        let reg = Arc::new(s.single_net_registry(NonZeroU64::new(256).unwrap()));
        let r = run_attack_scenario(&s, attack_config(1e9), reg).unwrap();
        let background = r.trace.iter().filter(|t| !t.from_attacker).count() as u64;
        assert!(background > 0);
        assert_eq!(r.accepted + r.discarded, s.n_clicks + background);
        assert!(r.trace.windows(2).all(|w| w[0].click.time <= w[1].click.time));
        assert!(r.trace.iter().all(|t| t.from_attacker || t.click.source != s.attacker_ip));
    }

    #[test]
    fn regular_intervals_without_jitter() {
        let mut s = AttackScenario::new("203.0.113.7".parse().unwrap(), "/ad", 4, 1);
        s.interval_jitter = 0.0;
        s.mean_interval_seconds = 10.0;
        let reg = Arc::new(s.single_net_registry(NonZeroU64::new(256).unwrap()));
        let r = run_attack_scenario(&s, attack_config(1e9), reg).unwrap();
        let times: Vec<f64> = r.trace.iter().map(|t| t.click.time).collect();
        assert_eq!(times, vec![0.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn attacker_outside_registry_is_rejected() {
        let s = AttackScenario::new("198.51.100.1".parse().unwrap(), "/ad", 3, 1);
        let reg = Arc::new(Registry::empty(NonZeroU64::MIN));
        assert!(matches!(
            run_attack_scenario(&s, attack_config(10.0), reg),
            Err(SimError::InvalidScenario(_))
        ));
    }
}
