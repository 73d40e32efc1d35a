mod support;

use std::net::Ipv4Addr;
use std::num::NonZeroU64;

use clickshield_core::load_registry;
use proptest::prelude::*;
use support::naive_engine::{naive_lookup, parse_ranges};

fn registry_rows() -> impl Strategy<Value = Vec<(u32, u8, Option<u64>)>> {
    prop::collection::vec(
        (
            prop_oneof![Just(0x0a00_0000u32), Just(0x0a01_0200), any::<u32>()],
            0u8..=32,
            prop::option::of(1u64..1_000_000),
        ),
        0..40,
    )
}

fn render(rows: &[(u32, u8, Option<u64>)]) -> String {
    let mut seen = std::collections::HashSet::new();
    let mut out = String::new();
    for (i, &(addr, len, pool)) in rows.iter().enumerate() {
        let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
        let base = addr & mask;
        if !seen.insert((base, len)) {
            continue;
        }
        out.push_str(&format!("{}/{},net{i}", Ipv4Addr::from(base), len));
        if let Some(p) = pool {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

proptest! {
    #[test]
    fn lookup_matches_linear_scan(rows in registry_rows(), probes in prop::collection::vec(any::<u32>(), 1..50)) {
        let src = render(&rows);
        let reg = load_registry(&src, NonZeroU64::new(7).unwrap()).unwrap();
        let naive = parse_ranges(&src);
        for p in probes {
            let ip = Ipv4Addr::from(p);
            let got = reg.lookup_net(ip);
            let (id, pool) = naive_lookup(&naive, ip, 7);
            prop_assert_eq!(got.net_id(), id.as_str());
            prop_assert_eq!(got.pool_size(), pool);
            prop_assert!(got.contains(ip));
            // no longer registered prefix also contains the address
            prop_assert!(reg.ranges().all(|r| !r.contains(ip) || r.prefix_len() <= got.prefix_len()));
            prop_assert_eq!(reg.lookup_net(ip), got);
        }
    }

    #[test]
    fn every_row_found_by_its_base(rows in registry_rows()) {
        let src = render(&rows);
        let reg = load_registry(&src, NonZeroU64::MIN).unwrap();
        for r in reg.ranges() {
            let hit = reg.lookup_net(r.base());
            let shadowed = reg
                .ranges()
                .any(|o| o.prefix_len() > r.prefix_len() && o.contains(r.base()));
            if !shadowed {
                prop_assert_eq!(&hit, r);
            }
        }
    }
}
