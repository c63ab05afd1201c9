use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::runtime::RuntimeConfig;
use crate::store::StoreConfig;

/// Service configuration, usually read from a TOML file. Every field has a default;
/// see `docs/wire-format.md` for the full list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub listen: SocketAddr,
    /// Threads for HTTP handling, separate from the executor workers.
    pub frontend_threads: usize,
    pub runtime: RuntimeConfig,
    pub store: StoreConfig,
    pub batching: BatchingConfig,
    pub result_cache: ResultCacheConfig,
    /// Bundle directories registered at startup.
    pub bundles: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchingConfig {
    /// Buffering window in microseconds; 0 disables delayed batching.
    pub window_us: u64,
    pub max_batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResultCacheConfig {
    pub enabled: bool,
    pub entries: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            listen: "127.0.0.1:8080".parse().expect("valid address"),
            frontend_threads: 2,
            runtime: RuntimeConfig::default(),
            store: StoreConfig::default(),
            batching: BatchingConfig::default(),
            result_cache: ResultCacheConfig::default(),
            bundles: Vec::new(),
        }
    }
}

impl Default for BatchingConfig {
    fn default() -> Self {
        BatchingConfig {
            window_us: 0,
            max_batch: 64,
        }
    }
}

impl Default for ResultCacheConfig {
    fn default() -> Self {
        ResultCacheConfig {
            enabled: true,
            entries: 100_000,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl FrontendConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(FrontendConfig::from_toml("").unwrap(), FrontendConfig::default());
    }

    #[test]
    fn partial_sections() {
        let c = FrontendConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            bundles = ["fleet/sa-0000"]
            [batching]
            window_us = 5000
            [runtime.scheduler]
            workers = 8
            "#,
        )
        .unwrap();
        assert_eq!(c.listen.port(), 9000);
        assert_eq!(c.batching.window_us, 5000);
        assert_eq!(c.batching.max_batch, 64);
        assert_eq!(c.runtime.scheduler.workers, 8);
        assert!(c.runtime.pooling);
        assert_eq!(c.bundles.len(), 1);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(FrontendConfig::from_toml("[batching]\nwindow = 5").is_err());
    }
}
