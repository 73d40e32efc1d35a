use std::num::NonZeroU64;
use std::sync::Arc;

use clickshield_core::traffic_simulator::{run_attack_scenario, run_nat_scenario, run_nat_scenario_with};
use clickshield_core::{AttackScenario, EngineConfig, NatScenario, SamplingMode, Threshold, WindowConfig};
use proptest::prelude::*;

/// Mean repeated-click fraction by enumerating all `pool^clicks` equally
/// likely address assignments.
fn enumerated_fraction(pool: u64, clicks: u32) -> f64 {
    let total = pool.pow(clicks);
    let mut repeats = 0u64;
    for code in 0..total {
        let mut seen = vec![false; pool as usize];
        let mut c = code;
        for _ in 0..clicks {
            let a = (c % pool) as usize;
            c /= pool;
            if seen[a] {
                repeats += 1;
            }
            seen[a] = true;
        }
    }
    repeats as f64 / (total as f64 * clicks as f64)
}

/// Occupancy identity: `E[distinct] = A·(1 − (1 − 1/A)^C)`.
fn occupancy_fraction(pool: u64, clicks: u64) -> f64 {
    let a = pool as f64;
    let distinct = a * (1.0 - (1.0 - 1.0 / a).powi(clicks as i32));
    1.0 - distinct / clicks as f64
}

#[test]
fn occupancy_identity_agrees_with_enumeration() {
    for pool in 1..=3 {
        for clicks in 1..=4 {
            let e = enumerated_fraction(pool, clicks);
            let o = occupancy_fraction(pool, clicks as u64);
            assert!((e - o).abs() < 1e-15, "A={pool} C={clicks}: {e} vs {o}");
        }
    }
}

#[test]
fn small_instances_match_occupancy_expectation() {
    for (pool, clicks) in [(10u64, 5u64), (37, 60), (100, 200), (100, 1)] {
        let s = NatScenario {
            pool_size: pool,
            user_count: 10_000,
            clicker_count: clicks,
            runs: 100_000,
            seed: pool * 1000 + clicks,
        };
        let r = run_nat_scenario(&s).unwrap();
        let want = occupancy_fraction(pool, clicks);
        let err = (r.mean_repeated_fraction - want).abs();
        assert!(err <= 3.0 * r.std_error + 1e-12, "A={pool} C={clicks}: {} vs {want} (se {})", r.mean_repeated_fraction, r.std_error);
        assert!(r.mean_repeated_fraction < r.model_upper_bound + 3.0 * r.std_error);
    }
}

#[test]
fn materialized_users_match_direct_sampling() {
    let s = NatScenario {
        pool_size: 20,
        user_count: 500,
        clicker_count: 15,
        runs: 40_000,
        seed: 3,
    };
    let direct = run_nat_scenario_with(&s, SamplingMode::Direct).unwrap();
    let full = run_nat_scenario_with(&s, SamplingMode::MaterializeUsers).unwrap();
    let want = occupancy_fraction(20, 15);
    for r in [&direct, &full] {
        assert!((r.mean_repeated_fraction - want).abs() <= 3.0 * r.std_error);
    }
    let pooled_se = (direct.std_error.powi(2) + full.std_error.powi(2)).sqrt();
    assert!((direct.mean_repeated_fraction - full.mean_repeated_fraction).abs() <= 4.0 * pooled_se);
}

#[test]
fn address_fraction_is_reported() {
    // with A=2, C=2 an address repeats with probability 1/2, out of 2 addresses
    let s = NatScenario {
        pool_size: 2,
        user_count: 4,
        clicker_count: 2,
        runs: 200_000,
        seed: 1,
    };
    let r = run_nat_scenario(&s).unwrap();
    assert!((r.mean_address_fraction - 0.25).abs() < 0.005);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lone_attacker_billed_once(
        n in 1u64..300,
        seed in any::<u64>(),
        jitter in 0.0f64..=1.0,
        interval in 1.0f64..5000.0,
    ) {
        let mut s = AttackScenario::new("203.0.113.50".parse().unwrap(), "/promo", n, seed);
        s.interval_jitter = jitter;
        s.mean_interval_seconds = interval;
        let pool = 1u64 << 16;
        prop_assume!(0.5 * (n - 1) as f64 / (pool as f64) < 0.01);
        let registry = Arc::new(s.single_net_registry(NonZeroU64::new(pool).unwrap()));
        let cfg = EngineConfig::new(WindowConfig::new(1e12).unwrap(), Threshold::new(0.01).unwrap());
        let report = run_attack_scenario(&s, cfg, registry).unwrap();
        prop_assert_eq!(report.accepted, 1);
        prop_assert_eq!(report.discarded, n - 1);
    }

    #[test]
    fn nat_runs_are_reproducible(pool in 1u64..50, clicks in 1u64..30, seed in any::<u64>()) {
        let s = NatScenario { pool_size: pool, user_count: 100, clicker_count: clicks, runs: 20, seed };
        let a = run_nat_scenario(&s).unwrap();
        let b = run_nat_scenario(&s).unwrap();
        prop_assert_eq!(a.mean_repeated_fraction.to_bits(), b.mean_repeated_fraction.to_bits());
        prop_assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
        prop_assert_eq!(a.samples, b.samples);
    }
}
