use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::EpochMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    InProcess,
    Subprocess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Strategy {
    #[default]
    RoundRobin,
    LeastConnections,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RouteRule {
    /// An HTTP method, or `"*"` for any.
    pub method: String,
    pub path_prefix: String,
    #[serde(default)]
    pub strategy: Strategy,
}

impl RouteRule {
    pub fn new(method: &str, path_prefix: &str, strategy: Strategy) -> Self {
        Self {
            method: method.to_string(),
            path_prefix: path_prefix.to_string(),
            strategy,
        }
    }

    pub fn any(path_prefix: &str) -> Self {
        Self::new("*", path_prefix, Strategy::RoundRobin)
    }

    pub fn key(&self) -> (String, String) {
        (self.method.to_ascii_uppercase(), self.path_prefix.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceQuota {
    pub max_memory_bytes: u64,
    pub max_concurrent_requests: u32,
}

impl Default for ResourceQuota {
    fn default() -> Self {
        Self {
            max_memory_bytes: 256 * 1024 * 1024,
            max_concurrent_requests: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub module_id: String,
    pub name: String,
    pub version: String,
    pub paradigm: Paradigm,
    pub routes: Vec<RouteRule>,
    #[serde(default)]
    pub quota: ResourceQuota,
    #[serde(default)]
    pub demand_loaded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_ttl_s: Option<u64>,
    /// Handler name (InProcess) or executable path plus arguments (Subprocess).
    pub artifact_ref: String,
    #[serde(default = "one")]
    pub replicas_desired: u32,
    /// Per-module upstream timeout; the kernel default applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream_timeout_ms: Option<u64>,
}

fn one() -> u32 {
    1
}

impl ModuleDescriptor {
    /// An InProcess descriptor with one replica and a wildcard route on `prefix`.
    pub fn in_process(module_id: &str, handler: &str, prefix: &str) -> Self {
        Self {
            module_id: module_id.to_string(),
            name: module_id.to_string(),
            version: "1.0.0".to_string(),
            paradigm: Paradigm::InProcess,
            routes: vec![RouteRule::any(prefix)],
            quota: ResourceQuota::default(),
            demand_loaded: false,
            idle_ttl_s: None,
            artifact_ref: handler.to_string(),
            replicas_desired: 1,
            upstream_timeout_ms: None,
        }
    }

    pub fn subprocess(module_id: &str, command: &str, prefix: &str) -> Self {
        Self {
            paradigm: Paradigm::Subprocess,
            ..Self::in_process(module_id, command, prefix)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.module_id.is_empty() {
            return Err("module_id: must be non-empty".into());
        }
        if self.module_id.contains('/') || self.module_id.chars().any(char::is_whitespace) {
            return Err("module_id: must not contain '/' or whitespace".into());
        }
        if self.replicas_desired < 1 {
            return Err("replicas_desired: must be at least 1".into());
        }
        Version::from_str(&self.version).map_err(|e| format!("version: {e}"))?;
        if self.quota.max_memory_bytes == 0 || self.quota.max_concurrent_requests == 0 {
            return Err("quota: limits must be positive".into());
        }
        match (self.demand_loaded, self.idle_ttl_s) {
            (true, None) => return Err("idle_ttl_s: required for demand-loaded modules".into()),
            (true, Some(0)) => return Err("idle_ttl_s: must be positive".into()),
            (false, Some(_)) => return Err("idle_ttl_s: only valid for demand-loaded modules".into()),
            _ => {}
        }
        if self.artifact_ref.trim().is_empty() {
            return Err("artifact_ref: must be non-empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.routes {
            if !r.path_prefix.starts_with('/') {
                return Err(format!("routes: prefix {:?} must start with '/'", r.path_prefix));
            }
            if r.method.is_empty() {
                return Err("routes: method must be non-empty".into());
            }
            if !seen.insert(r.key()) {
                return Err(format!("routes: duplicate rule {} {}", r.method, r.path_prefix));
            }
        }
        Ok(())
    }
}

/// Dotted numeric version with 2 or 3 components, compared numerically.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Version(Vec<u64>);

impl Version {
    pub fn components(&self) -> &[u64] {
        &self.0
    }
}

impl FromStr for Version {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(format!("{s:?} must have 2 or 3 dotted components"));
        }
        parts
            .iter()
            .map(|p| {
                if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                    Err(format!("{s:?} has a non-numeric component"))
                } else {
                    p.parse::<u64>().map_err(|e| format!("{s:?}: {e}"))
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Version)
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        let n = self.0.len().max(other.0.len());
        (0..n)
            .map(|i| {
                let a = self.0.get(i).copied().unwrap_or(0);
                let b = other.0.get(i).copied().unwrap_or(0);
                a.cmp(&b)
            })
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstanceState {
    Starting,
    Ready,
    Degraded,
    Unhealthy,
    Stopping,
    Stopped,
}

impl InstanceState {
    pub const ALL: [InstanceState; 6] = [
        InstanceState::Starting,
        InstanceState::Ready,
        InstanceState::Degraded,
        InstanceState::Unhealthy,
        InstanceState::Stopping,
        InstanceState::Stopped,
    ];

    /// The lifecycle edges. `Starting -> Stopped` covers a failed start;
    /// `Degraded -> {Unhealthy, Stopping}` lets a degraded instance fail
    /// further or be drained.
    pub fn can_transition(self, to: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, to),
            (Starting, Ready)
                | (Starting, Stopped)
                | (Ready, Degraded)
                | (Ready, Unhealthy)
                | (Ready, Stopping)
                | (Degraded, Ready)
                | (Degraded, Unhealthy)
                | (Degraded, Stopping)
                | (Degraded, Stopped)
                | (Unhealthy, Stopping)
                | (Unhealthy, Stopped)
                | (Stopping, Stopped)
        )
    }

    /// Eligible for request routing.
    pub fn is_serving(self) -> bool {
        matches!(self, InstanceState::Ready | InstanceState::Degraded)
    }

    pub fn is_live(self) -> bool {
        !matches!(self, InstanceState::Stopping | InstanceState::Stopped)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Starting => "Starting",
            InstanceState::Ready => "Ready",
            InstanceState::Degraded => "Degraded",
            InstanceState::Unhealthy => "Unhealthy",
            InstanceState::Stopping => "Stopping",
            InstanceState::Stopped => "Stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointInfo {
    InProcess { handler: String },
    Subprocess { pid: Option<u32>, command: String },
}

/// Immutable snapshot of a running execution environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub instance_id: String,
    pub module_id: String,
    pub version: String,
    pub state: InstanceState,
    pub endpoint: EndpointInfo,
    pub started_at: EpochMs,
    pub active_requests: u64,
    pub restart_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeploymentStatus {
    Active,
    Superseded,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    pub module_id: String,
    pub version: String,
    pub artifact_ref: String,
    pub deployed_at: EpochMs,
    pub status: DeploymentStatus,
}
