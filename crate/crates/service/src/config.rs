//! Service configuration: built-in defaults, then an optional TOML file, then
//! `CLICKSHIELD_*` environment variables, then command-line flags.

use std::net::SocketAddr;
use std::num::NonZeroU64;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clickshield_core::filter_engine::DEFAULT_LEDGER_CAPACITY;
use clickshield_core::{load_registry, EngineConfig, Registry, Threshold, WindowConfig};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "CLICKSHIELD_";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceConfig {
    pub listen_address: SocketAddr,
    pub registry_path: PathBuf,
    pub window_seconds: f64,
    pub threshold: f64,
    pub fallback_pool_size: u64,
    /// `None` disables the decision log.
    pub decision_log_path: Option<PathBuf>,
    pub ledger_capacity: usize,
    /// Pending log writes before `/clicks` answers 503.
    pub log_queue_capacity: usize,
    /// Client-supplied timestamps further than this from the server clock are
    /// rejected. `None` trusts every timestamp.
    pub max_clock_skew_seconds: Option<f64>,
}

/// Every field optional; one layer of configuration.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub listen_address: Option<SocketAddr>,
    pub registry_path: Option<PathBuf>,
    pub window_seconds: Option<f64>,
    pub threshold: Option<f64>,
    pub fallback_pool_size: Option<u64>,
    /// An empty path disables the log.
    pub decision_log_path: Option<PathBuf>,
    pub ledger_capacity: Option<usize>,
    pub log_queue_capacity: Option<usize>,
    pub max_clock_skew_seconds: Option<f64>,
}

impl ConfigLayer {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }

    pub fn from_env() -> anyhow::Result<Self> {
        Self::from_vars(std::env::vars())
    }

    pub fn from_vars(vars: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let mut layer = Self::default();
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let bad = |e: &dyn std::fmt::Display| anyhow!("{key}={value:?}: {e}");
            match name {
                "LISTEN_ADDRESS" => layer.listen_address = Some(value.parse().map_err(|e| bad(&e))?),
                "REGISTRY_PATH" => layer.registry_path = Some(value.into()),
                "WINDOW_SECONDS" => layer.window_seconds = Some(value.parse().map_err(|e| bad(&e))?),
                "THRESHOLD" => layer.threshold = Some(value.parse().map_err(|e| bad(&e))?),
                "FALLBACK_POOL_SIZE" => {
                    layer.fallback_pool_size = Some(value.parse().map_err(|e| bad(&e))?)
                }
                "DECISION_LOG_PATH" => layer.decision_log_path = Some(value.into()),
                "LEDGER_CAPACITY" => layer.ledger_capacity = Some(value.parse().map_err(|e| bad(&e))?),
                "LOG_QUEUE_CAPACITY" => {
                    layer.log_queue_capacity = Some(value.parse().map_err(|e| bad(&e))?)
                }
                "MAX_CLOCK_SKEW_SECONDS" => {
                    layer.max_clock_skew_seconds = Some(value.parse().map_err(|e| bad(&e))?)
                }
                // other CLICKSHIELD_* variables (e.g. log filters) are not config
                _ => {}
            }
        }
        Ok(layer)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            listen_address: over.listen_address.or(self.listen_address),
            registry_path: over.registry_path.or(self.registry_path),
            window_seconds: over.window_seconds.or(self.window_seconds),
            threshold: over.threshold.or(self.threshold),
            fallback_pool_size: over.fallback_pool_size.or(self.fallback_pool_size),
            decision_log_path: over.decision_log_path.or(self.decision_log_path),
            ledger_capacity: over.ledger_capacity.or(self.ledger_capacity),
            log_queue_capacity: over.log_queue_capacity.or(self.log_queue_capacity),
            max_clock_skew_seconds: over.max_clock_skew_seconds.or(self.max_clock_skew_seconds),
        }
    }

    pub fn resolve(self) -> anyhow::Result<ServiceConfig> {
        let config = ServiceConfig {
            listen_address: self
                .listen_address
                .unwrap_or_else(|| "127.0.0.1:8080".parse().expect("valid literal")),
            registry_path: self
                .registry_path
                .ok_or_else(|| anyhow!("registry_path is required"))?,
            window_seconds: self.window_seconds.unwrap_or(3600.0),
            threshold: self.threshold.unwrap_or(0.01),
            fallback_pool_size: self.fallback_pool_size.unwrap_or(1),
            decision_log_path: self
                .decision_log_path
                .filter(|p| !p.as_os_str().is_empty()),
            ledger_capacity: self.ledger_capacity.unwrap_or(DEFAULT_LEDGER_CAPACITY),
            log_queue_capacity: self.log_queue_capacity.unwrap_or(4096),
            max_clock_skew_seconds: self.max_clock_skew_seconds,
        };
        config.engine_config()?;
        if config.log_queue_capacity == 0 {
            bail!("log_queue_capacity must be positive");
        }
        if let Some(skew) = config.max_clock_skew_seconds {
            if !(skew.is_finite() && skew >= 0.0) {
                bail!("max_clock_skew_seconds must be a non-negative number");
            }
        }
        Ok(config)
    }
}

impl ServiceConfig {
    pub fn engine_config(&self) -> anyhow::Result<EngineConfig> {
        let window = WindowConfig::new(self.window_seconds)?;
        let threshold = Threshold::new(self.threshold)?;
        let fallback = NonZeroU64::new(self.fallback_pool_size)
            .ok_or_else(|| anyhow!("fallback_pool_size must be positive"))?;
        if self.ledger_capacity == 0 {
            bail!("ledger_capacity must be positive");
        }
        Ok(EngineConfig::new(window, threshold)
            .with_fallback_pool_size(fallback)
            .with_ledger_capacity(self.ledger_capacity))
    }

    pub fn load_registry(&self) -> anyhow::Result<Arc<Registry>> {
        let text = std::fs::read_to_string(&self.registry_path)
            .with_context(|| format!("reading registry {}", self.registry_path.display()))?;
        let fallback = NonZeroU64::new(self.fallback_pool_size)
            .ok_or_else(|| anyhow!("fallback_pool_size must be positive"))?;
        let registry = load_registry(&text, fallback)
            .with_context(|| format!("loading registry {}", self.registry_path.display()))?;
        Ok(Arc::new(registry))
    }
}
