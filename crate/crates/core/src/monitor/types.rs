use serde::{Deserialize, Serialize};

use crate::clock::EpochMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    LatencyUs,
    Throughput,
    MemoryBytes,
    CpuPermille,
    QueueDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub at: EpochMs,
    pub module_id: String,
    pub instance_id: String,
    pub metric: Metric,
    pub value: f64,
}

/// One observed request/response pair at an instance boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoRecord {
    pub at: EpochMs,
    pub module_id: String,
    pub instance_id: String,
    pub request_id: String,
    pub input_digest: u64,
    pub output_status: u16,
    pub output_digest: u64,
    /// Set iff the status is 5xx or the transport failed.
    pub error: bool,
}

impl IoRecord {
    pub fn is_error_status(status: u16) -> bool {
        status >= 500
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub at: EpochMs,
    pub level: Level,
    /// Component name or instance id.
    pub source: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Ok,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub instance_id: String,
    pub module_id: String,
    pub at: EpochMs,
    pub outcome: ProbeOutcome,
    pub memory_bytes_selfreport: u64,
    pub consecutive_failures: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    P95,
    Mean,
    Max,
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub rule_id: String,
    pub metric: Metric,
    pub aggregation: Aggregation,
    pub window_s: u64,
    pub threshold: f64,
    pub direction: Direction,
    /// A module id or `"*"` for every module.
    pub target: String,
}

impl AlertRule {
    pub fn validate(&self) -> Result<(), String> {
        if self.rule_id.is_empty() {
            return Err("rule_id: must be non-empty".into());
        }
        if self.window_s == 0 {
            return Err("window_s: must be positive".into());
        }
        if !self.threshold.is_finite() {
            return Err("threshold: must be finite".into());
        }
        if self.target.is_empty() {
            return Err("target: must be a module id or \"*\"".into());
        }
        Ok(())
    }

    pub fn matches(&self, module_id: &str) -> bool {
        self.target == "*" || self.target == module_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub rule_id: String,
    pub at: EpochMs,
    pub target: String,
    pub value: f64,
    pub threshold: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub component: String,
    pub event: String,
    pub at: EpochMs,
    pub error: bool,
}

/// What a history query aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistorySource {
    Metric(Metric),
    /// Every IoRecord.
    Requests,
    /// IoRecords with `error = true`.
    Errors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub bucket_start: EpochMs,
    pub count: usize,
    pub value: Option<f64>,
}
