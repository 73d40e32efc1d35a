//! Randomized click streams over a small nested registry.

#![allow(dead_code)]

use std::net::Ipv4Addr;

use clickshield_core::ClickEvent;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REGISTRY: &str = "\
# nested ranges, some with explicit pool sizes
10.0.0.0/8,corp
10.1.0.0/16,branch,5000
10.1.2.0/24,office,40
10.1.2.128/25,lab,3
172.16.0.0/12,isp
172.16.5.0/24,cgnat,900
192.168.1.0/24,home,2
";

pub struct Stream {
    pub fallback: u64,
    pub window: f64,
    pub threshold: f64,
    pub events: Vec<ClickEvent>,
}

pub fn random_stream(seed: u64, len: usize) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<Ipv4Addr> = (0..60)
        .map(|i| match i % 6 {
            0 => Ipv4Addr::new(10, 1, 2, rng.random_range(0..=255)),
            1 => Ipv4Addr::new(10, 1, rng.random_range(0..4), rng.random()),
            2 => Ipv4Addr::new(10, rng.random_range(0..3), rng.random(), rng.random()),
            3 => Ipv4Addr::new(172, 16, 5, rng.random_range(0..8)),
            4 => Ipv4Addr::new(192, 168, 1, rng.random_range(0..3)),
            _ => Ipv4Addr::new(8, 8, rng.random_range(0..2), rng.random_range(0..2)),
        })
        .collect();
    let dests = ["/landing", "/promo", "/landing?ref=a", "/x"];

    let window = *[30.0, 120.0, 600.0].choose(&mut rng).unwrap();
    let threshold = *[0.005, 0.01, 0.05, 0.2].choose(&mut rng).unwrap();
    let fallback = *[1u64, 16].choose(&mut rng).unwrap();

    let mut t = 0.0f64;
    let events = (0..len)
        .map(|_| {
            // unit-mean exponential gaps
            t += -(1.0 - rng.random::<f64>()).ln();
            let time = if rng.random_bool(0.05) {
                (t - rng.random_range(0.0..300.0)).max(0.0)
            } else {
                t
            };
            ClickEvent::new(
                *sources.choose(&mut rng).unwrap(),
                *dests.choose(&mut rng).unwrap(),
                time,
            )
            .unwrap()
        })
        .collect();

    Stream {
        fallback,
        window,
        threshold,
        events,
    }
}
