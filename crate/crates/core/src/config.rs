//! Kernel configuration: a JSON file whose field names match
//! [`KernelConfig`]. `MUK_CONFIG` names the file, `MUK_SECRET` overrides
//! the token secret.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::KernelError;
use crate::isc::RetryPolicy;

pub const CONFIG_ENV: &str = "MUK_CONFIG";
pub const SECRET_ENV: &str = "MUK_SECRET";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub listen_addr: String,
    pub admin_addr: String,
    pub probe_interval_s: f64,
    pub probe_failure_threshold: u32,
    pub mapek_period_s: f64,
    pub mapek_enabled: bool,

    pub session_ttl_s: u64,
    pub token_ttl_s: u64,
    pub login_rate_limit: u64,
    pub login_rate_window_s: u64,
    pub retry_policy: RetryPolicy,
    pub upstream_timeout_ms: u64,
    pub max_replicas: u32,
    pub housekeeping_ms: u64,

    pub secret: Option<String>,
    pub credentials_path: Option<PathBuf>,
    pub registry_path: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    pub knowledge_path: Option<PathBuf>,
    /// Directory served at `/console/`.
    pub console_dir: Option<PathBuf>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            listen_addr: "127.0.0.1:8080".into(),
            admin_addr: "127.0.0.1:8081".into(),
            probe_interval_s: 5.0,
            probe_failure_threshold: 3,
            mapek_period_s: 5.0,
            mapek_enabled: true,
            session_ttl_s: 1800,
            token_ttl_s: 3600,
            login_rate_limit: 5,
            login_rate_window_s: 60,
            retry_policy: RetryPolicy::default(),
            upstream_timeout_ms: 10_000,
            max_replicas: 16,
            housekeeping_ms: 50,
            secret: None,
            credentials_path: None,
            registry_path: None,
            history_path: None,
            knowledge_path: None,
            console_dir: None,
        }
    }
}

fn positive_secs(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

fn check_addr(v: &str) -> bool {
    v.parse::<SocketAddr>().is_ok()
        || v.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok())
}

impl KernelConfig {
    /// Loopback addresses on ephemeral ports; handy for tests.
    pub fn ephemeral() -> Self {
        Self {
            listen_addr: "127.0.0.1:0".into(),
            admin_addr: "127.0.0.1:0".into(),
            ..Self::default()
        }
    }

    /// Names the first offending field.
    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = |f: &str| Err(KernelError::InvalidConfig(f.to_string()));
        if !check_addr(&self.listen_addr) {
            return bad("listen_addr");
        }
        if !check_addr(&self.admin_addr) {
            return bad("admin_addr");
        }
        if !positive_secs(self.probe_interval_s) {
            return bad("probe_interval_s");
        }
        if self.probe_failure_threshold < 1 {
            return bad("probe_failure_threshold");
        }
        if !positive_secs(self.mapek_period_s) {
            return bad("mapek_period_s");
        }
        if self.session_ttl_s == 0 {
            return bad("session_ttl_s");
        }
        if self.token_ttl_s == 0 {
            return bad("token_ttl_s");
        }
        if self.login_rate_limit == 0 {
            return bad("login_rate_limit");
        }
        if self.login_rate_window_s == 0 {
            return bad("login_rate_window_s");
        }
        if self.retry_policy.validate().is_err() {
            return bad("retry_policy");
        }
        if self.upstream_timeout_ms == 0 {
            return bad("upstream_timeout_ms");
        }
        if self.max_replicas == 0 {
            return bad("max_replicas");
        }
        if self.housekeeping_ms == 0 {
            return bad("housekeeping_ms");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, KernelError> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            // serde names the field in "unknown field `x`" and "invalid type ... for key `x`".
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| format!("json: {msg}"));
            KernelError::InvalidConfig(field)
        })
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let text = std::fs::read_to_string(path).map_err(|e| KernelError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Reads `MUK_CONFIG` if set, else `fallback` if given, else defaults.
    /// `MUK_SECRET` wins over the file's secret.
    pub fn from_env(fallback: Option<&Path>) -> Result<Self, KernelError> {
        let mut cfg = match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::load(Path::new(&p))?,
            None => match fallback {
                Some(p) => Self::load(p)?,
                None => Self::default(),
            },
        };
        if let Ok(s) = std::env::var(SECRET_ENV) {
            if !s.is_empty() {
                cfg.secret = Some(s);
            }
        }
        Ok(cfg)
    }

    pub fn probe_interval(&self) -> Duration {
        Duration::from_secs_f64(self.probe_interval_s)
    }

    pub fn mapek_period(&self) -> Duration {
        Duration::from_secs_f64(self.mapek_period_s)
    }
}
