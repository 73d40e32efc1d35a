//! Registered network ranges and longest-prefix lookup of a source address.
//!
//! Registry files are UTF-8 text with one `CIDR,net_id[,pool_size]` row per
//! line. Blank lines and lines starting with `#` are skipped.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::num::NonZeroU64;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate range {cidr} (first defined on line {first_line})")]
    Duplicate {
        line: usize,
        first_line: usize,
        cidr: String,
    },
    #[error("line {line}: pool size must be a positive integer, got {value:?}")]
    InvalidPoolSize { line: usize, value: String },
}

/// One registered network block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetRange {
    net_id: String,
    base: Ipv4Addr,
    prefix_len: u8,
    pool_size: NonZeroU64,
}

impl NetRange {
    /// Builds a range whose pool size is the full block, `2^(32 - prefix_len)`.
    pub fn new(net_id: impl Into<String>, base: Ipv4Addr, prefix_len: u8) -> Result<Self, String> {
        if prefix_len > 32 {
            return Err(format!("prefix length {prefix_len} exceeds 32"));
        }
        let size = NonZeroU64::new(1u64 << (32 - prefix_len)).expect("block size is non-zero");
        Self::with_pool_size(net_id, base, prefix_len, size)
    }

    pub fn with_pool_size(
        net_id: impl Into<String>,
        base: Ipv4Addr,
        prefix_len: u8,
        pool_size: NonZeroU64,
    ) -> Result<Self, String> {
        if prefix_len > 32 {
            return Err(format!("prefix length {prefix_len} exceeds 32"));
        }
        if u32::from(base) & !mask(prefix_len) != 0 {
            return Err(format!("{base}/{prefix_len} has host bits set"));
        }
        Ok(Self {
            net_id: net_id.into(),
            base,
            prefix_len,
            pool_size,
        })
    }

    pub fn net_id(&self) -> &str {
        &self.net_id
    }

    pub fn base(&self) -> Ipv4Addr {
        self.base
    }

    pub fn prefix_len(&self) -> u8 {
        self.prefix_len
    }

    pub fn pool_size(&self) -> u64 {
        self.pool_size.get()
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & mask(self.prefix_len) == u32::from(self.base)
    }
}

impl fmt::Display for NetRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({})", self.base, self.prefix_len, self.net_id)
    }
}

fn mask(prefix_len: u8) -> u32 {
    match prefix_len {
        0 => 0,
        n => u32::MAX << (32 - n),
    }
}

/// Immutable set of ranges keyed by prefix length.
///
/// Lookup probes the populated prefix lengths from longest to shortest, so a
/// query costs at most 33 hash probes regardless of registry size.
#[derive(Debug, Clone)]
pub struct Registry {
    by_prefix: Vec<HashMap<u32, NetRange>>,
    // populated prefix lengths, longest first
    lengths: Vec<u8>,
    fallback_pool_size: NonZeroU64,
}

impl Registry {
    pub fn empty(fallback_pool_size: NonZeroU64) -> Self {
        Self {
            by_prefix: vec![HashMap::new(); 33],
            lengths: Vec::new(),
            fallback_pool_size,
        }
    }

    /// Adds a range. Returns the range back if its `(base, prefix_len)` is
    /// already registered.
    pub fn insert(&mut self, range: NetRange) -> Result<(), NetRange> {
        let len = range.prefix_len;
        let slot = &mut self.by_prefix[len as usize];
        let key = u32::from(range.base);
        if slot.contains_key(&key) {
            return Err(range);
        }
        slot.insert(key, range);
        if !self.lengths.contains(&len) {
            self.lengths.push(len);
            self.lengths.sort_unstable_by(|a, b| b.cmp(a));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.by_prefix.iter().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn fallback_pool_size(&self) -> u64 {
        self.fallback_pool_size.get()
    }

    pub fn ranges(&self) -> impl Iterator<Item = &NetRange> {
        self.by_prefix.iter().flat_map(HashMap::values)
    }

    /// The most specific registered range containing `ip`, if any.
    pub fn find(&self, ip: Ipv4Addr) -> Option<&NetRange> {
        let addr = u32::from(ip);
        self.lengths
            .iter()
            .find_map(|&len| self.by_prefix[len as usize].get(&(addr & mask(len))))
    }

    /// Like [`Registry::find`], but unmatched addresses resolve to a synthetic
    /// `/32` range carrying the fallback pool size.
    pub fn lookup_net(&self, ip: Ipv4Addr) -> NetRange {
        match self.find(ip) {
            Some(range) => range.clone(),
            None => NetRange {
                net_id: format!("host:{ip}"),
                base: ip,
                prefix_len: 32,
                pool_size: self.fallback_pool_size,
            },
        }
    }
}

/// Parses registry file content.
pub fn load_registry(source: &str, fallback_pool_size: NonZeroU64) -> Result<Registry, RegistryError> {
    let mut registry = Registry::empty(fallback_pool_size);
    let mut first_seen: HashMap<(u32, u8), usize> = HashMap::new();

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let range = parse_row(text, line)?;
        let key = (u32::from(range.base), range.prefix_len);
        if let Some(&first_line) = first_seen.get(&key) {
            return Err(RegistryError::Duplicate {
                line,
                first_line,
                cidr: format!("{}/{}", range.base, range.prefix_len),
            });
        }
        first_seen.insert(key, line);
        registry
            .insert(range)
            .expect("duplicates are rejected before insertion");
    }
    Ok(registry)
}

fn parse_row(text: &str, line: usize) -> Result<NetRange, RegistryError> {
    let parse_err = |reason: String| RegistryError::Parse { line, reason };

    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    if !(2..=3).contains(&fields.len()) {
        return Err(parse_err(format!(
            "expected `CIDR,net_id[,pool_size]`, found {} fields",
            fields.len()
        )));
    }
    let (addr, prefix) = fields[0]
        .split_once('/')
        .ok_or_else(|| parse_err(format!("{:?} is not in CIDR form", fields[0])))?;
    let base: Ipv4Addr = addr
        .parse()
        .map_err(|_| parse_err(format!("invalid IPv4 address {addr:?}")))?;
    let prefix_len: u8 = prefix
        .parse()
        .ok()
        .filter(|p| *p <= 32)
        .ok_or_else(|| parse_err(format!("invalid prefix length {prefix:?}")))?;
    let net_id = fields[1];
    if net_id.is_empty() {
        return Err(parse_err("empty net_id".to_string()));
    }

    let range = match fields.get(2) {
        Some(value) => {
            let pool_size = value
                .parse::<u64>()
                .ok()
                .and_then(NonZeroU64::new)
                .ok_or_else(|| RegistryError::InvalidPoolSize {
                    line,
                    value: value.to_string(),
                })?;
            NetRange::with_pool_size(net_id, base, prefix_len, pool_size)
        }
        None => NetRange::new(net_id, base, prefix_len),
    };
    range.map_err(parse_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> NonZeroU64 {
        NonZeroU64::new(1).unwrap()
    }

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn sample() -> Registry {
        load_registry("10.0.0.0/8,netA\n10.1.0.0/16,netB\n", one()).unwrap()
    }

    #[test]
    fn default_pool_sizes() {
        let reg = sample();
        assert_eq!(reg.len(), 2);
        assert_eq!(reg.lookup_net(ip("10.2.0.1")).pool_size(), 1 << 24);
        assert_eq!(reg.lookup_net(ip("10.1.0.1")).pool_size(), 1 << 16);
    }

    #[test]
    fn explicit_pool_size_wins() {
        let reg = load_registry("10.0.0.0/8,netA,1000000", one()).unwrap();
        assert_eq!(reg.lookup_net(ip("10.9.9.9")).pool_size(), 1_000_000);
    }

    #[test]
    fn comments_blank_lines_and_whitespace() {
        let src = "# whois export\n\n  192.168.0.0/24 , lan , 40 \n0.0.0.0/0,world\n";
        let reg = load_registry(src, one()).unwrap();
        assert_eq!(reg.len(), 2);
        let r = reg.lookup_net(ip("192.168.0.77"));
        assert_eq!((r.net_id(), r.pool_size()), ("lan", 40));
        assert_eq!(reg.lookup_net(ip("8.8.8.8")).net_id(), "world");
    }

    #[test]
    fn duplicate_cidr_is_a_conflict() {
        let err = load_registry("10.0.0.0/8,netA\n10.0.0.0/8,netC\n", one()).unwrap_err();
        assert_eq!(
            err,
            RegistryError::Duplicate {
                line: 2,
                first_line: 1,
                cidr: "10.0.0.0/8".into()
            }
        );
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        for (src, line) in [
            ("10.0.0.0/8,a\n10.0.0/8,b", 2),
            ("10.0.0.0/33,a", 1),
            ("10.0.0.0,a", 1),
            ("# c\n10.0.0.1/8,a", 2),
            ("10.0.0.0/8", 1),
            ("10.0.0.0/8,a,1,2", 1),
            ("10.0.0.0/8,", 1),
        ] {
            match load_registry(src, one()) {
                Err(RegistryError::Parse { line: l, .. }) => assert_eq!(l, line, "{src}"),
                other => panic!("{src:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn pool_size_must_be_positive() {
        for bad in ["0", "-5", "abc", ""] {
            let err = load_registry(&format!("10.0.0.0/8,a,{bad}"), one()).unwrap_err();
            assert!(matches!(err, RegistryError::InvalidPoolSize { line: 1, .. }), "{bad}");
        }
    }

    #[test]
    fn longest_prefix_wins() {
        let reg = sample();
        assert_eq!(reg.lookup_net(ip("10.1.2.3")).net_id(), "netB");
        assert_eq!(reg.lookup_net(ip("10.2.0.1")).net_id(), "netA");
    }

    #[test]
    fn unmatched_falls_back_to_host_range() {
        let reg = sample();
        let r = reg.lookup_net(ip("192.0.2.1"));
        assert_eq!(r.prefix_len(), 32);
        assert_eq!(r.pool_size(), 1);
        assert_eq!(r.base(), ip("192.0.2.1"));
        assert_eq!(r.net_id(), "host:192.0.2.1");

        let wide = load_registry("", NonZeroU64::new(64).unwrap()).unwrap();
        assert_eq!(wide.lookup_net(ip("192.0.2.1")).pool_size(), 64);
    }

    #[test]
    fn host_bits_rejected() {
        assert!(NetRange::new("x", ip("10.0.0.1"), 8).is_err());
        assert!(NetRange::new("x", ip("10.0.0.1"), 32).is_ok());
        assert!(NetRange::new("x", ip("0.0.0.0"), 0).is_ok());
        assert_eq!(NetRange::new("x", ip("0.0.0.0"), 0).unwrap().pool_size(), 1 << 32);
    }
}
