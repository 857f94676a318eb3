//! Metrics, I/O capture, logs, alerting, history, and request traces.

mod ring;
pub mod stats;
mod types;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::thread;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

pub use ring::Ring;
pub use types::*;

use crate::clock::EpochMs;
use crate::isc::Bus;

pub const ALERTS_TOPIC: &str = "alerts";

#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub sample_capacity: usize,
    pub io_capacity: usize,
    pub log_capacity: usize,
    pub probe_capacity: usize,
    /// Newline-delimited JSON history file; disabled when `None`.
    pub history_path: Option<PathBuf>,
    /// Window used for snapshot latency, throughput and error figures.
    pub snapshot_window_s: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            sample_capacity: 65_536,
            io_capacity: 65_536,
            log_capacity: 16_384,
            probe_capacity: 16_384,
            history_path: None,
            snapshot_window_s: 10,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("bad range: from {from} is after to {to}")]
    BadRange { from: EpochMs, to: EpochMs },
    #[error("invalid alert rule: {0}")]
    InvalidRule(String),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum HistoryLine {
    Sample(MetricSample),
    Io(IoRecord),
    Log(LogRecord),
    Probe(ProbeReport),
    Alert(AlertEvent),
}

enum HistoryMsg {
    Line(String),
    Flush(mpsc::Sender<()>),
}

struct History {
    tx: SyncSender<HistoryMsg>,
    dropped: AtomicU64,
}

impl History {
    fn open(path: PathBuf) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file: File = OpenOptions::new().create(true).append(true).open(&path)?;
        let (tx, rx) = mpsc::sync_channel::<HistoryMsg>(8192);
        thread::Builder::new()
            .name("muk-history".into())
            .spawn(move || {
                let mut w = BufWriter::new(file);
                while let Ok(msg) = rx.recv() {
                    match msg {
                        HistoryMsg::Line(l) => {
                            let _ = w.write_all(l.as_bytes());
                            let _ = w.write_all(b"\n");
                        }
                        HistoryMsg::Flush(ack) => {
                            let _ = w.flush();
                            let _ = ack.send(());
                        }
                    }
                }
                let _ = w.flush();
            })?;
        Ok(Self {
            tx,
            dropped: AtomicU64::new(0),
        })
    }

    fn append(&self, line: &HistoryLine) {
        let Ok(s) = serde_json::to_string(line) else { return };
        if let Err(TrySendError::Full(_)) = self.tx.try_send(HistoryMsg::Line(s)) {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn flush(&self) {
        let (ack, done) = mpsc::channel();
        if self.tx.send(HistoryMsg::Flush(ack)).is_ok() {
            let _ = done.recv_timeout(std::time::Duration::from_secs(5));
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DropCounters {
    pub samples: u64,
    pub io: u64,
    pub logs: u64,
    pub probes: u64,
    pub history: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AlertStatus {
    pub rule_id: String,
    pub breaching: bool,
    pub last_value: Option<f64>,
    pub events: u64,
}

/// Per-module figures over a trailing window.
#[derive(Debug, Clone, Default, Serialize)]
pub struct WindowStats {
    pub requests: usize,
    pub errors: usize,
    pub throughput_rps: f64,
    pub error_rate: f64,
    pub p50_us: Option<f64>,
    pub p95_us: Option<f64>,
}

/// Registry-side facts the snapshot needs from the kernel.
#[derive(Debug, Clone, Serialize)]
pub struct ModuleStates {
    pub module_id: String,
    pub kernel_server: bool,
    pub version: String,
    pub instance_states: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuleHealth {
    pub module_id: String,
    pub kernel_server: bool,
    pub version: String,
    pub instances: usize,
    pub health: BTreeMap<String, usize>,
    #[serde(flatten)]
    pub window: WindowStats,
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemSnapshot {
    pub at: EpochMs,
    pub window_s: u64,
    pub modules: Vec<ModuleHealth>,
    pub alerts: Vec<AlertStatus>,
    pub queue_depths: BTreeMap<String, usize>,
    pub mapek_mode: String,
    pub dropped: DropCounters,
}

#[derive(Default)]
struct AlertState {
    breaching: bool,
    last_value: Option<f64>,
    events: u64,
}

pub struct Monitor {
    cfg: MonitorConfig,
    seq: AtomicU64,
    samples: Ring<MetricSample>,
    io: Ring<IoRecord>,
    logs: Ring<LogRecord>,
    probes: Ring<ProbeReport>,
    rules: RwLock<Vec<AlertRule>>,
    alert_states: Mutex<HashMap<String, AlertState>>,
    history: Option<History>,
    bus: Option<Bus>,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor").finish_non_exhaustive()
    }
}

impl Monitor {
    pub fn new(cfg: MonitorConfig, bus: Option<Bus>) -> std::io::Result<Self> {
        let history = cfg.history_path.clone().map(History::open).transpose()?;
        Ok(Self {
            seq: AtomicU64::new(0),
            samples: Ring::new(cfg.sample_capacity),
            io: Ring::new(cfg.io_capacity),
            logs: Ring::new(cfg.log_capacity),
            probes: Ring::new(cfg.probe_capacity),
            rules: RwLock::new(Vec::new()),
            alert_states: Mutex::new(HashMap::new()),
            history,
            bus,
            cfg,
        })
    }

    fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::Relaxed)
    }

    pub fn record_sample(&self, sample: MetricSample) {
        if !(sample.value >= 0.0) {
            return;
        }
        if let Some(h) = &self.history {
            h.append(&HistoryLine::Sample(sample.clone()));
        }
        self.samples.push(self.next_seq(), sample);
    }

    pub fn record_io(&self, io: IoRecord) {
        if let Some(h) = &self.history {
            h.append(&HistoryLine::Io(io.clone()));
        }
        self.io.push(self.next_seq(), io);
    }

    pub fn append_log(&self, rec: LogRecord) {
        if let Some(h) = &self.history {
            h.append(&HistoryLine::Log(rec.clone()));
        }
        self.logs.push(self.next_seq(), rec);
    }

    pub fn log(&self, at: EpochMs, level: Level, source: &str, message: impl Into<String>, request_id: Option<&str>) {
        self.append_log(LogRecord {
            at,
            level,
            source: source.to_string(),
            message: message.into(),
            request_id: request_id.map(str::to_string),
        });
    }

    pub fn record_probe(&self, report: ProbeReport) {
        if let Some(h) = &self.history {
            h.append(&HistoryLine::Probe(report.clone()));
        }
        self.probes.push(self.next_seq(), report);
    }

    pub fn flush(&self) {
        if let Some(h) = &self.history {
            h.flush();
        }
    }

    pub fn drops(&self) -> DropCounters {
        DropCounters {
            samples: self.samples.dropped(),
            io: self.io.dropped(),
            logs: self.logs.dropped(),
            probes: self.probes.dropped(),
            history: self
                .history
                .as_ref()
                .map(|h| h.dropped.load(Ordering::Relaxed))
                .unwrap_or(0),
        }
    }

    pub fn samples_where<F: Fn(&MetricSample) -> bool>(&self, pred: F) -> Vec<MetricSample> {
        self.samples.filter(pred).into_iter().map(|(_, s)| s).collect()
    }

    pub fn last_samples<F: Fn(&MetricSample) -> bool>(&self, n: usize, pred: F) -> Vec<MetricSample> {
        self.samples.last_n(n, pred)
    }

    pub fn first_samples<F: Fn(&MetricSample) -> bool>(&self, n: usize, pred: F) -> Vec<MetricSample> {
        self.samples.first_n(n, pred)
    }

    pub fn io_where<F: Fn(&IoRecord) -> bool>(&self, pred: F) -> Vec<IoRecord> {
        self.io.filter(pred).into_iter().map(|(_, r)| r).collect()
    }

    pub fn logs_where<F: Fn(&LogRecord) -> bool>(&self, pred: F) -> Vec<LogRecord> {
        self.logs.filter(pred).into_iter().map(|(_, r)| r).collect()
    }

    pub fn probes_for(&self, instance_id: &str, n: usize) -> Vec<ProbeReport> {
        self.probes.last_n(n, |p| p.instance_id == instance_id)
    }

    pub fn io_count(&self) -> usize {
        self.io.len()
    }

    // ---- alerts ----

    pub fn rules(&self) -> Vec<AlertRule> {
        self.rules.read().clone()
    }

    /// Adds or replaces (by `rule_id`) an alert rule.
    pub fn upsert_rule(&self, rule: AlertRule) -> Result<(), MonitorError> {
        rule.validate().map_err(MonitorError::InvalidRule)?;
        let mut rules = self.rules.write();
        match rules.iter_mut().find(|r| r.rule_id == rule.rule_id) {
            Some(r) => *r = rule,
            None => rules.push(rule),
        }
        Ok(())
    }

    pub fn remove_rule(&self, rule_id: &str) -> bool {
        let mut rules = self.rules.write();
        let before = rules.len();
        rules.retain(|r| r.rule_id != rule_id);
        self.alert_states.lock().remove(rule_id);
        rules.len() != before
    }

    fn window_values(&self, rule: &AlertRule, now: EpochMs) -> Vec<f64> {
        let from = now.saturating_sub(rule.window_s * 1000);
        self.samples
            .filter(|s| s.metric == rule.metric && s.at > from && s.at <= now && rule.matches(&s.module_id))
            .into_iter()
            .map(|(_, s)| s.value)
            .collect()
    }

    /// Evaluates every rule over its trailing window. A rule emits once when
    /// it starts breaching and stays silent until it has cleared again.
    pub fn evaluate_alerts(&self, now: EpochMs) -> Vec<AlertEvent> {
        let rules = self.rules();
        let mut events = Vec::new();
        for rule in &rules {
            let values = self.window_values(rule, now);
            if values.is_empty() {
                continue;
            }
            let value = match rule.aggregation {
                Aggregation::P95 => stats::percentile(&values, 95.0),
                Aggregation::Mean => stats::mean(&values),
                Aggregation::Max => stats::max(&values),
                Aggregation::Rate => Some(values.len() as f64 / rule.window_s as f64),
            }
            .unwrap_or(0.0);
            let breach = match rule.direction {
                Direction::Above => value > rule.threshold,
                Direction::Below => value < rule.threshold,
            };
            let mut states = self.alert_states.lock();
            let st = states.entry(rule.rule_id.clone()).or_default();
            st.last_value = Some(value);
            if breach && !st.breaching {
                st.events += 1;
                events.push(AlertEvent {
                    rule_id: rule.rule_id.clone(),
                    at: now,
                    target: rule.target.clone(),
                    value,
                    threshold: rule.threshold,
                    message: format!(
                        "{:?} {:?} of {:?} is {value:.1}, {:?} threshold {}",
                        rule.aggregation, rule.metric, rule.target, rule.direction, rule.threshold
                    ),
                });
            }
            st.breaching = breach;
        }
        for ev in &events {
            self.emit_alert(ev.clone());
        }
        events
    }

    /// Publishes an alert that did not come from a rule (reaped tasks,
    /// quota breaches, and the like).
    pub fn raise(&self, at: EpochMs, rule_id: &str, target: &str, message: impl Into<String>) -> AlertEvent {
        let ev = AlertEvent {
            rule_id: rule_id.to_string(),
            at,
            target: target.to_string(),
            value: 0.0,
            threshold: 0.0,
            message: message.into(),
        };
        self.emit_alert(ev.clone());
        ev
    }

    fn emit_alert(&self, ev: AlertEvent) {
        self.log(ev.at, Level::Warn, "monitor", format!("alert {}: {}", ev.rule_id, ev.message), None);
        if let Some(h) = &self.history {
            h.append(&HistoryLine::Alert(ev.clone()));
        }
        if let Some(bus) = &self.bus {
            let _ = bus.publish_json(ALERTS_TOPIC, &ev);
        }
    }

    pub fn alert_statuses(&self) -> Vec<AlertStatus> {
        let states = self.alert_states.lock();
        self.rules()
            .iter()
            .map(|r| {
                let st = states.get(&r.rule_id);
                AlertStatus {
                    rule_id: r.rule_id.clone(),
                    breaching: st.map(|s| s.breaching).unwrap_or(false),
                    last_value: st.and_then(|s| s.last_value),
                    events: st.map(|s| s.events).unwrap_or(0),
                }
            })
            .collect()
    }

    // ---- queries ----

    /// Aggregates `source` for `target` ("*" for all modules) into 1 s
    /// buckets covering `[from, to]`. Every bucket in range is returned;
    /// empty buckets carry `value: None` except for `Rate`, which is 0.
    pub fn query_history(
        &self,
        source: HistorySource,
        target: &str,
        from: EpochMs,
        to: EpochMs,
        aggregation: Aggregation,
    ) -> Result<Vec<SeriesPoint>, MonitorError> {
        if from > to {
            return Err(MonitorError::BadRange { from, to });
        }
        let matches = |m: &str| target == "*" || target == m;
        let points: Vec<(EpochMs, f64)> = match source {
            HistorySource::Metric(metric) => self
                .samples
                .filter(|s| s.metric == metric && s.at >= from && s.at <= to && matches(&s.module_id))
                .into_iter()
                .map(|(_, s)| (s.at, s.value))
                .collect(),
            HistorySource::Requests | HistorySource::Errors => self
                .io
                .filter(|r| {
                    r.at >= from
                        && r.at <= to
                        && matches(&r.module_id)
                        && (source == HistorySource::Requests || r.error)
                })
                .into_iter()
                .map(|(_, r)| (r.at, 1.0))
                .collect(),
        };
        let first = from / 1000 * 1000;
        let last = to / 1000 * 1000;
        let mut buckets: BTreeMap<EpochMs, Vec<f64>> = (first..=last).step_by(1000).map(|b| (b, Vec::new())).collect();
        for (at, v) in points {
            if let Some(b) = buckets.get_mut(&(at / 1000 * 1000)) {
                b.push(v);
            }
        }
        Ok(buckets
            .into_iter()
            .map(|(bucket_start, vals)| SeriesPoint {
                bucket_start,
                count: vals.len(),
                value: match aggregation {
                    Aggregation::P95 => stats::percentile(&vals, 95.0),
                    Aggregation::Mean => stats::mean(&vals),
                    Aggregation::Max => stats::max(&vals),
                    Aggregation::Rate => Some(vals.len() as f64),
                },
            })
            .collect())
    }

    /// Every log and I/O record bearing `request_id`, oldest first.
    pub fn trace_request(&self, request_id: &str) -> Vec<TraceEvent> {
        let mut events: Vec<(EpochMs, u64, TraceEvent)> = self
            .logs
            .filter(|l| l.request_id.as_deref() == Some(request_id))
            .into_iter()
            .map(|(seq, l)| {
                (
                    l.at,
                    seq,
                    TraceEvent {
                        component: l.source,
                        event: l.message,
                        at: l.at,
                        error: l.level == Level::Error,
                    },
                )
            })
            .collect();
        events.extend(
            self.io
                .filter(|r| r.request_id == request_id)
                .into_iter()
                .map(|(seq, r)| {
                    (
                        r.at,
                        seq,
                        TraceEvent {
                            component: r.instance_id.clone(),
                            event: format!(
                                "io status={} in={:016x} out={:016x}",
                                r.output_status, r.input_digest, r.output_digest
                            ),
                            at: r.at,
                            error: r.error,
                        },
                    )
                }),
        );
        events.sort_by_key(|(at, seq, _)| (*at, *seq));
        events.into_iter().map(|(_, _, e)| e).collect()
    }

    /// Request counts, error rate and latency percentiles for one module
    /// over the `window_s` seconds ending at `now`.
    pub fn window_stats(&self, module_id: &str, now: EpochMs, window_s: u64) -> WindowStats {
        let from = now.saturating_sub(window_s * 1000);
        let ios = self.io.filter(|r| r.module_id == module_id && r.at > from && r.at <= now);
        let errors = ios.iter().filter(|(_, r)| r.error).count();
        let lat: Vec<f64> = self
            .samples
            .filter(|s| s.metric == Metric::LatencyUs && s.module_id == module_id && s.at > from && s.at <= now)
            .into_iter()
            .map(|(_, s)| s.value)
            .collect();
        WindowStats {
            requests: ios.len(),
            errors,
            throughput_rps: ios.len() as f64 / window_s.max(1) as f64,
            error_rate: if ios.is_empty() { 0.0 } else { errors as f64 / ios.len() as f64 },
            p50_us: stats::percentile(&lat, 50.0),
            p95_us: stats::percentile(&lat, 95.0),
        }
    }

    pub fn snapshot(
        &self,
        now: EpochMs,
        modules: Vec<ModuleStates>,
        queue_depths: BTreeMap<String, usize>,
        mapek_mode: &str,
    ) -> SystemSnapshot {
        let window_s = self.cfg.snapshot_window_s;
        let modules = modules
            .into_iter()
            .map(|m| {
                let mut health = BTreeMap::new();
                for s in &m.instance_states {
                    *health.entry(s.clone()).or_insert(0) += 1;
                }
                ModuleHealth {
                    window: self.window_stats(&m.module_id, now, window_s),
                    instances: m.instance_states.len(),
                    module_id: m.module_id,
                    kernel_server: m.kernel_server,
                    version: m.version,
                    health,
                }
            })
            .collect();
        SystemSnapshot {
            at: now,
            window_s,
            modules,
            alerts: self.alert_statuses(),
            queue_depths,
            mapek_mode: mapek_mode.to_string(),
            dropped: self.drops(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mon() -> Monitor {
        Monitor::new(MonitorConfig::default(), None).unwrap()
    }

    fn lat(at: EpochMs, v: f64) -> MetricSample {
        MetricSample {
            at,
            module_id: "m".into(),
            instance_id: "m-1".into(),
            metric: Metric::LatencyUs,
            value: v,
        }
    }

    fn io(at: EpochMs, req: &str, status: u16) -> IoRecord {
        IoRecord {
            at,
            module_id: "m".into(),
            instance_id: "m-1".into(),
            request_id: req.into(),
            input_digest: 1,
            output_status: status,
            output_digest: 2,
            error: IoRecord::is_error_status(status),
        }
    }

    fn p95_rule() -> AlertRule {
        AlertRule {
            rule_id: "lat".into(),
            metric: Metric::LatencyUs,
            aggregation: Aggregation::P95,
            window_s: 10,
            threshold: 100.0,
            direction: Direction::Above,
            target: "m".into(),
        }
    }

    #[test]
    fn ring_overflow_counts_drops() {
        let m = Monitor::new(
            MonitorConfig {
                sample_capacity: 4,
                ..MonitorConfig::default()
            },
            None,
        )
        .unwrap();
        for i in 0..5 {
            m.record_sample(lat(i, i as f64));
        }
        assert_eq!(m.drops().samples, 1);
        let kept: Vec<f64> = m.samples_where(|_| true).iter().map(|s| s.value).collect();
        assert_eq!(kept, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn p95_breach_is_edge_triggered() {
        let m = mon();
        m.upsert_rule(p95_rule()).unwrap();
        let now = 100_000;
        for (i, v) in [50.0, 60.0, 200.0, 210.0, 220.0].into_iter().enumerate() {
            m.record_sample(lat(now - 1000 + i as u64, v));
        }
        let ev = m.evaluate_alerts(now);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].value, 220.0);
        assert!(m.evaluate_alerts(now + 1).is_empty(), "no duplicate while breaching");
    }

    #[test]
    fn empty_window_emits_nothing() {
        let m = mon();
        m.upsert_rule(p95_rule()).unwrap();
        assert!(m.evaluate_alerts(1_000_000).is_empty());
    }

    #[test]
    fn breach_clear_breach_emits_twice() {
        let m = mon();
        m.upsert_rule(AlertRule {
            window_s: 1,
            ..p95_rule()
        })
        .unwrap();
        let mut events = 0;
        for (t, v) in [(1_000, 500.0), (2_000, 500.0), (3_000, 10.0), (4_000, 500.0), (5_000, 500.0)] {
            m.record_sample(lat(t, v));
            events += m.evaluate_alerts(t).len();
        }
        assert_eq!(events, 2);
    }

    #[test]
    fn invalid_rule_rejected() {
        let m = mon();
        let err = m
            .upsert_rule(AlertRule {
                window_s: 0,
                ..p95_rule()
            })
            .unwrap_err();
        assert!(matches!(err, MonitorError::InvalidRule(s) if s.starts_with("window_s")));
    }

    #[test]
    fn history_mean_per_bucket_and_bad_range() {
        let m = mon();
        m.record_sample(lat(10_100, 10.0));
        m.record_sample(lat(10_900, 30.0));
        m.record_sample(lat(11_500, 7.0));
        let series = m
            .query_history(HistorySource::Metric(Metric::LatencyUs), "m", 10_000, 11_999, Aggregation::Mean)
            .unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].value, Some(20.0));
        assert_eq!(series[1].value, Some(7.0));
        assert_eq!(
            m.query_history(HistorySource::Errors, "*", 5, 4, Aggregation::Rate),
            Err(MonitorError::BadRange { from: 5, to: 4 })
        );
    }

    #[test]
    fn error_rate_series_matches_hand_count() {
        let m = mon();
        // bucket 20s: 2 errors of 3; bucket 21s: none; bucket 22s: 1 error of 1
        m.record_io(io(20_001, "a", 500));
        m.record_io(io(20_400, "b", 200));
        m.record_io(io(20_999, "c", 503));
        m.record_io(io(22_000, "d", 502));
        let s = m
            .query_history(HistorySource::Errors, "*", 20_000, 22_999, Aggregation::Rate)
            .unwrap();
        let rates: Vec<Option<f64>> = s.iter().map(|p| p.value).collect();
        assert_eq!(rates, [Some(2.0), Some(0.0), Some(1.0)]);
    }

    #[test]
    fn trace_is_time_ordered() {
        let m = mon();
        m.log(5, Level::Info, "dispatcher", "dispatch GET /x", Some("r1"));
        m.record_io(io(7, "r1", 502));
        m.log(6, Level::Info, "m-1", "forward", Some("r1"));
        m.log(7, Level::Error, "dispatcher", "error 502", Some("r1"));
        m.log(6, Level::Info, "dispatcher", "unrelated", Some("r2"));
        let t = m.trace_request("r1");
        assert_eq!(t.len(), 4);
        assert!(t.windows(2).all(|w| w[0].at <= w[1].at));
        assert!(t.last().unwrap().error);
        assert!(m.trace_request("unknown").is_empty());
    }

    #[test]
    fn history_file_is_ndjson() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.ndjson");
        let m = Monitor::new(
            MonitorConfig {
                history_path: Some(path.clone()),
                ..MonitorConfig::default()
            },
            None,
        )
        .unwrap();
        m.record_sample(lat(1, 2.0));
        m.record_io(io(2, "r", 200));
        m.flush();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["type"], "sample");
        assert_eq!(lines[1]["type"], "io");
    }

    #[test]
    fn snapshot_counts_health_and_throughput() {
        let m = mon();
        let now = 50_000;
        for i in 0..10 {
            m.record_io(io(now - 100 - i, &format!("r{i}"), 200));
        }
        let snap = m.snapshot(
            now,
            vec![ModuleStates {
                module_id: "m".into(),
                kernel_server: false,
                version: "1.0.0".into(),
                instance_states: vec!["Ready".into(), "Unhealthy".into()],
            }],
            BTreeMap::new(),
            "mapek",
        );
        let mh = &snap.modules[0];
        assert_eq!(mh.window.requests, 10);
        assert_eq!(mh.health["Unhealthy"], 1);
        assert_eq!(mh.health["Ready"], 1);
        assert!(serde_json::to_value(&snap).is_ok());
    }
}
