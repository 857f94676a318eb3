//! Sequential latency benchmark: the same echo handler deployed InProcess
//! and as a Subprocess, measured one request at a time through the edge
//! listener.

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::KernelConfig;
use crate::error::KernelError;
use crate::kernel::{self, BootOptions, KernelHandle};
use crate::registry::ModuleDescriptor;

pub const INPROC_MODULE: &str = "bench-inproc";
pub const SUBPROC_MODULE: &str = "bench-subproc";
pub const INPROC_PREFIX: &str = "/bench/inproc";
pub const SUBPROC_PREFIX: &str = "/bench/subproc";
const PAYLOAD: &[u8] = b"{\"ping\":\"muk-bench\"}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    InProcess,
    Subprocess,
}

impl Scenario {
    pub fn file_stem(self) -> &'static str {
        match self {
            Scenario::InProcess => "inprocess",
            Scenario::Subprocess => "subprocess",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::InProcess => "InProcess",
            Scenario::Subprocess => "Subprocess",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: Scenario,
    pub requests: usize,
    pub median_us: u64,
    pub p95_us: u64,
    pub mean_us: f64,
    pub errors: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench failed: {scenario} saw {errors} non-2xx responses out of {requests}")]
    BenchFailed {
        scenario: Scenario,
        errors: usize,
        requests: usize,
    },
    #[error("bench setup: {0}")]
    Setup(String),
    #[error("raw latency file: {0}")]
    Io(#[from] std::io::Error),
}

impl From<KernelError> for BenchError {
    fn from(e: KernelError) -> Self {
        BenchError::Setup(e.to_string())
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl BenchReport {
    pub fn from_latencies(scenario: Scenario, latencies_us: &[u64], errors: usize, wall_clock_s: f64) -> Self {
        let mut sorted = latencies_us.to_vec();
        sorted.sort_unstable();
        let (median_us, p95_us, mean_us) = if sorted.is_empty() {
            (0, 0, 0.0)
        } else {
            (
                nearest_rank(&sorted, 50.0),
                nearest_rank(&sorted, 95.0),
                sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
            )
        };
        Self {
            scenario,
            requests: latencies_us.len(),
            median_us,
            p95_us,
            mean_us,
            errors,
            wall_clock_s,
        }
    }
}

/// Bootstrap standard error of the nearest-rank median.
pub fn bootstrap_median_se(samples: &[u64], resamples: usize, seed: u64) -> f64 {
    if samples.len() < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0u64; samples.len()];
    let medians: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = samples[rng.gen_range(0..samples.len())];
            }
            buf.sort_unstable();
            nearest_rank(&buf, 50.0) as f64
        })
        .collect();
    let mean = medians.iter().sum::<f64>() / medians.len() as f64;
    let var = medians.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (medians.len() - 1) as f64;
    var.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub inprocess_median_us: u64,
    pub subprocess_median_us: u64,
    pub gap_us: f64,
    pub se_inprocess_us: f64,
    pub se_subprocess_us: f64,
    /// Standard error of the difference of the two medians.
    pub se_gap_us: f64,
    pub inprocess_faster: bool,
    pub gap_exceeds_3se: bool,
}

impl Verdict {
    pub fn holds(&self) -> bool {
        self.inprocess_faster && self.gap_exceeds_3se
    }
}

pub fn verdict(inproc: &[u64], subproc: &[u64], resamples: usize, seed: u64) -> Verdict {
    let med = |v: &[u64]| {
        let mut s = v.to_vec();
        s.sort_unstable();
        if s.is_empty() {
            0
        } else {
            nearest_rank(&s, 50.0)
        }
    };
    let (a, b) = (med(inproc), med(subproc));
    let se_a = bootstrap_median_se(inproc, resamples, seed);
    let se_b = bootstrap_median_se(subproc, resamples, seed.wrapping_add(1));
    let se_gap = (se_a * se_a + se_b * se_b).sqrt();
    let gap = b as f64 - a as f64;
    Verdict {
        inprocess_median_us: a,
        subprocess_median_us: b,
        gap_us: gap,
        se_inprocess_us: se_a,
        se_subprocess_us: se_b,
        se_gap_us: se_gap,
        inprocess_faster: a < b,
        gap_exceeds_3se: gap > 3.0 * se_gap,
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub requests: usize,
    pub warmup: usize,
    /// Directory for the raw latency files; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resamples: usize,
    pub seed: u64,
    pub request_timeout: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            requests: 1000,
            warmup: 100,
            out_dir: None,
            resamples: 2000,
            seed: 7,
            request_timeout: Duration::from_secs(10),
        }
    }
}

/// One scenario's timed run plus its raw latencies.
#[derive(Debug, Clone)]
pub struct Measured {
    pub report: BenchReport,
    pub latencies_us: Vec<u64>,
    pub raw_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchOutcome {
    pub reports: (BenchReport, BenchReport),
    pub verdict: Verdict,
    pub raw_files: Vec<PathBuf>,
    #[serde(skip)]
    pub raw: (Vec<u64>, Vec<u64>),
}

pub fn write_raw(path: &Path, latencies_us: &[u64]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in latencies_us {
        writeln!(w, "{l}")?;
    }
    w.flush()
}

pub fn read_raw(path: &Path) -> std::io::Result<Vec<u64>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{l:?}: {e}")))
        })
        .collect()
}

/// Blocking: sends warmup then timed POSTs to `url` one at a time. Must not
/// run on an async worker thread.
pub fn measure(url: &str, scenario: Scenario, cfg: &BenchConfig) -> Result<Measured, BenchError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(cfg.request_timeout)
        .build()
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    let send = || client.post(url).body(PAYLOAD).send().map(|r| r.status().is_success()).unwrap_or(false);
    for _ in 0..cfg.warmup {
        send();
    }
    let mut latencies = Vec::with_capacity(cfg.requests);
    let mut errors = 0;
    let wall = Instant::now();
    for _ in 0..cfg.requests {
        let t = Instant::now();
        let ok = send();
        latencies.push(t.elapsed().as_micros() as u64);
        if !ok {
            errors += 1;
        }
    }
    let report = BenchReport::from_latencies(scenario, &latencies, errors, wall.elapsed().as_secs_f64());
    let raw_file = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let p = dir.join(format!("bench-{}.lat", scenario.file_stem()));
            write_raw(&p, &latencies)?;
            Some(p)
        }
        None => None,
    };
    // More than 0.1% failures voids the run.
    if errors * 1000 > cfg.requests {
        return Err(BenchError::BenchFailed {
            scenario,
            errors,
            requests: cfg.requests,
        });
    }
    Ok(Measured {
        report,
        latencies_us: latencies,
        raw_file,
    })
}

/// Measures both scenarios against an edge listener whose bench modules
/// are already registered.
pub fn measure_both(edge: SocketAddr, cfg: &BenchConfig) -> Result<BenchOutcome, BenchError> {
    let a = measure(&format!("http://{edge}{INPROC_PREFIX}"), Scenario::InProcess, cfg)?;
    let b = measure(&format!("http://{edge}{SUBPROC_PREFIX}"), Scenario::Subprocess, cfg)?;
    let v = verdict(&a.latencies_us, &b.latencies_us, cfg.resamples, cfg.seed);
    Ok(BenchOutcome {
        reports: (a.report, b.report),
        verdict: v,
        raw_files: a.raw_file.into_iter().chain(b.raw_file).collect(),
        raw: (a.latencies_us, b.latencies_us),
    })
}

pub fn descriptors(testmod_command: &str) -> [ModuleDescriptor; 2] {
    [
        ModuleDescriptor::in_process(INPROC_MODULE, "echo", INPROC_PREFIX),
        ModuleDescriptor::subprocess(SUBPROC_MODULE, testmod_command, SUBPROC_PREFIX),
    ]
}

/// Registers the bench modules on a running kernel, measures, and removes
/// them again.
pub async fn run_on(k: &KernelHandle, testmod_command: &str, cfg: BenchConfig) -> Result<BenchOutcome, BenchError> {
    for d in descriptors(testmod_command) {
        k.services.register_module(d).await?;
    }
    let edge = k.listen_addr();
    let res = tokio::task::spawn_blocking(move || measure_both(edge, &cfg))
        .await
        .map_err(|e| BenchError::Setup(e.to_string()))?;
    for id in [INPROC_MODULE, SUBPROC_MODULE] {
        let _ = k.services.unregister_module(id).await;
    }
    res
}

/// Boots a private kernel on ephemeral ports, runs the bench, shuts down.
pub async fn run_standalone(testmod_command: &str, cfg: BenchConfig) -> Result<BenchOutcome, BenchError> {
    let kcfg = KernelConfig {
        mapek_enabled: false,
        ..KernelConfig::ephemeral()
    };
    let k = kernel::boot_with(kcfg, BootOptions::manual()).await?;
    let res = run_on(&k, testmod_command, cfg).await;
    k.shutdown().await;
    res
}

pub fn render_table(o: &BenchOutcome) -> String {
    let mut s = format!(
        "{:<12} {:>9} {:>11} {:>9} {:>11} {:>7} {:>9}\n",
        "scenario", "requests", "median_us", "p95_us", "mean_us", "errors", "wall_s"
    );
    for r in [&o.reports.0, &o.reports.1] {
        s.push_str(&format!(
            "{:<12} {:>9} {:>11} {:>9} {:>11.1} {:>7} {:>9.2}\n",
            r.scenario.to_string(),
            r.requests,
            r.median_us,
            r.p95_us,
            r.mean_us,
            r.errors,
            r.wall_clock_s
        ));
    }
    let v = &o.verdict;
    s.push_str(&format!(
        "gap {:.1} us, se {:.1} us: {}\n",
        v.gap_us,
        v.se_gap_us,
        if v.holds() {
            "InProcess faster beyond 3 SE"
        } else {
            "ordering not established"
        }
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_by_hand() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(nearest_rank(&v, 50.0), 5);
        assert_eq!(nearest_rank(&v, 95.0), 10);
        assert_eq!(nearest_rank(&v, 0.0), 1);
        assert_eq!(nearest_rank(&[42], 95.0), 42);
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(nearest_rank(&v, 95.0), 19);
    }

    #[test]
    fn report_fields() {
        let r = BenchReport::from_latencies(Scenario::InProcess, &[30, 10, 20, 40], 1, 0.5);
        assert_eq!(r.requests, 4);
        assert_eq!(r.median_us, 20);
        assert_eq!(r.p95_us, 40);
        assert_eq!(r.mean_us, 25.0);
        assert!(r.median_us <= r.p95_us);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<u64> = (0..500).map(|i| 100 + (i * 37 % 101)).collect();
        let a = bootstrap_median_se(&v, 300, 1);
        assert_eq!(a, bootstrap_median_se(&v, 300, 1));
        assert!(a > 0.0);
        assert_eq!(bootstrap_median_se(&[5; 100], 300, 1), 0.0);
    }

    #[test]
    fn verdict_on_separated_samples() {
        let a: Vec<u64> = (0..1000).map(|i| 100 + i % 7).collect();
        let b: Vec<u64> = (0..1000).map(|i| 300 + i % 11).collect();
        let v = verdict(&a, &b, 200, 3);
        assert!(v.holds());
        let v = verdict(&b, &a, 200, 3);
        assert!(!v.inprocess_faster);
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.lat");
        write_raw(&p, &[3, 1, 2]).unwrap();
        assert_eq!(read_raw(&p).unwrap(), vec![3, 1, 2]);
    }
}
