use serde::{Deserialize, Serialize};

use super::types::{Symptom, SymptomClass};
use crate::clock::EpochMs;
use crate::monitor::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub crash_restarts: usize,
    pub crash_window_s: u64,
    /// Strictly increasing steps required in the memory series.
    pub leak_cycles: usize,
    /// Minimum growth over the run, as a fraction of the memory quota.
    pub leak_growth_fraction: f64,
    pub latency_factor: f64,
    pub latency_baseline_samples: usize,
    /// Fewest window samples before latency is judged.
    pub latency_min_samples: usize,
    pub error_rate: f64,
    pub error_min_requests: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            crash_restarts: 3,
            crash_window_s: 60,
            leak_cycles: 5,
            leak_growth_fraction: 0.20,
            latency_factor: 3.0,
            latency_baseline_samples: 50,
            latency_min_samples: 10,
            error_rate: 0.10,
            error_min_requests: 20,
        }
    }
}

/// Everything one instance looked like since the last action on its module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub instance_id: String,
    pub module_id: String,
    pub at: EpochMs,
    pub quota_bytes: u64,
    /// Per-probe memory self-reports, oldest first.
    pub memory: Vec<(EpochMs, f64)>,
    pub baseline_latency_us: Vec<f64>,
    pub latency_us: Vec<f64>,
    pub requests: usize,
    pub errors: usize,
    pub error_refs: Vec<String>,
    pub probe_failures: u32,
    pub probes: usize,
    /// Module restart times inside the crash window.
    pub restarts: Vec<EpochMs>,
}

impl ObservationWindow {
    pub fn has_data(&self) -> bool {
        !self.memory.is_empty() || !self.latency_us.is_empty() || self.requests > 0 || self.probes > 0 || !self.restarts.is_empty()
    }
}

/// Length of the trailing strictly increasing run (number of increases)
/// and the growth across it.
pub fn trailing_increase(series: &[f64]) -> (usize, f64) {
    let n = series.len();
    if n < 2 {
        return (0, 0.0);
    }
    let mut k = 0;
    while k + 1 < n && series[n - 2 - k] < series[n - 1 - k] {
        k += 1;
    }
    (k, series[n - 1] - series[n - 1 - k])
}

pub fn analyze(w: &ObservationWindow, t: &Thresholds) -> Vec<Symptom> {
    let mut out = Vec::new();
    let mk = |class, evidence: Vec<String>| Symptom {
        instance_id: w.instance_id.clone(),
        module_id: w.module_id.clone(),
        class,
        evidence,
        detected_at: w.at,
    };

    if w.restarts.len() >= t.crash_restarts {
        let ev = w.restarts.iter().map(|r| format!("restart@{r}")).collect();
        out.push(mk(SymptomClass::CrashLoop, ev));
    }

    let series: Vec<f64> = w.memory.iter().map(|(_, v)| *v).collect();
    let (incs, growth) = trailing_increase(&series);
    if incs >= t.leak_cycles && growth >= t.leak_growth_fraction * w.quota_bytes as f64 {
        let ev = w.memory[w.memory.len() - 1 - incs..]
            .iter()
            .map(|(at, v)| format!("MemoryBytes@{at}={v}"))
            .collect();
        out.push(mk(SymptomClass::MemoryLeak, ev));
    }

    if w.baseline_latency_us.len() >= t.latency_baseline_samples && w.latency_us.len() >= t.latency_min_samples {
        let base = stats::median(&w.baseline_latency_us).unwrap_or(0.0);
        let p95 = stats::percentile(&w.latency_us, 95.0).unwrap_or(0.0);
        if base > 0.0 && p95 > t.latency_factor * base {
            out.push(mk(
                SymptomClass::LatencyDegradation,
                vec![format!("LatencyUs.p95={p95}"), format!("LatencyUs.baseline={base}")],
            ));
        }
    }

    if w.requests >= t.error_min_requests && w.errors as f64 > t.error_rate * w.requests as f64 {
        let mut ev = vec![format!("io.errors={}/{}", w.errors, w.requests)];
        ev.extend(w.error_refs.iter().take(5).cloned());
        out.push(mk(SymptomClass::OutputAnomaly, ev));
    }

    out.sort_by_key(|s| std::cmp::Reverse(s.class.severity()));
    out
}
