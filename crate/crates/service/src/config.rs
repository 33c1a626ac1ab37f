use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Prefix of the environment variables that override file settings,
/// e.g. `CATREC_PORT=9000`.
pub const ENV_PREFIX: &str = "CATREC_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    /// `catalog.tsv` written by ingestion.
    pub catalog: PathBuf,
    pub host: String,
    pub port: u16,
    /// Default list length when a request does not ask for one.
    pub k: usize,
    /// Idle time after which a session is evicted.
    pub ttl_secs: u64,
    pub max_sessions: usize,
    /// Seconds clients are told to wait when the store is full.
    pub retry_after_secs: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model"),
            catalog: PathBuf::from("data/catalog.tsv"),
            host: "127.0.0.1".into(),
            port: 8080,
            k: 10,
            ttl_secs: 30 * 60,
            max_sessions: 10_000,
            retry_after_secs: 30,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Defaults, then `path` if given, then `CATREC_*` variables.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ServiceError> {
            v.trim().parse().map_err(|_| ServiceError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let var = |name: &str| get(&format!("{ENV_PREFIX}{name}")).map(|v| (format!("{ENV_PREFIX}{name}"), v));
        if let Some((_, v)) = var("CHECKPOINT") {
            self.checkpoint = v.into();
        }
        if let Some((_, v)) = var("CATALOG") {
            self.catalog = v.into();
        }
        if let Some((_, v)) = var("HOST") {
            self.host = v;
        }
        if let Some((k, v)) = var("PORT") {
            self.port = parse(&k, &v)?;
        }
        if let Some((k, v)) = var("K") {
            self.k = parse(&k, &v)?;
        }
        if let Some((k, v)) = var("TTL_SECS") {
            self.ttl_secs = parse(&k, &v)?;
        }
        if let Some((k, v)) = var("MAX_SESSIONS") {
            self.max_sessions = parse(&k, &v)?;
        }
        if let Some((k, v)) = var("RETRY_AFTER_SECS") {
            self.retry_after_secs = parse(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.k == 0 {
            return Err(ServiceError::Config("k must be at least 1".into()));
        }
        if self.ttl_secs == 0 {
            return Err(ServiceError::Config("ttl_secs must be positive".into()));
        }
        if self.max_sessions == 0 {
            return Err(ServiceError::Config("max_sessions must be positive".into()));
        }
        Ok(())
    }

    pub fn ttl(&self) -> Duration {
        Duration::from_secs(self.ttl_secs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn file_then_env() {
        let mut cfg = ServiceConfig::from_toml_str("port = 9000\nk = 5\n").unwrap();
        assert_eq!((cfg.port, cfg.k, cfg.ttl_secs), (9000, 5, 1800));
        let env: HashMap<&str, &str> = [("CATREC_K", "20"), ("CATREC_TTL_SECS", "60")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!((cfg.port, cfg.k, cfg.ttl_secs), (9000, 20, 60));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ServiceConfig::from_toml_str("colour = 1").is_err());
        let mut cfg = ServiceConfig::default();
        assert!(cfg.apply_env(|k| (k == "CATREC_PORT").then(|| "many".to_string())).is_err());
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }
}
