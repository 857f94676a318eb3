//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs all nine; pass criterion numbers
//! after `--` to run a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use common::*;
use muk::bench::{self, BenchConfig};
use muk::clock::{ManualClock, SharedClock};
use muk::config::KernelConfig;
use muk::fault::{Fault, FaultCommand};
use muk::isc::{decode, encode, Bus, Envelope, Kind};
use muk::kernel::{boot_with, BootOptions, KernelHandle};
use muk::monitor::{Aggregation, AlertRule, Direction, Metric, MetricSample, Monitor, MonitorConfig, ALERTS_TOPIC};
use muk::registry::{DeploymentStatus, InstanceState, ModuleDescriptor};
use muk::scheduler::{Scheduler, Step, TaskSpec, TaskState};
use muk::servers::auth::Claims;
use muk::servers::validate::{evaluate, FieldKind, Format, Rule};
use muk::servers::{self, AuthConfig, AuthServer, CredentialStore, SessionStore, Shaper, TokenSigner};
use muk::service::RecoveryMode;

type Outcome = Result<String, String>;
type Check = Pin<Box<dyn Future<Output = Outcome>>>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

const MIB: u64 = 1024 * 1024;

fn main() {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime");
    let criteria: Vec<(u32, &str, fn() -> Check)> = vec![
        (1, "paradigm overhead ordering", || Box::pin(c1_bench())),
        (2, "MAPE-K beats baseline on a leak", || Box::pin(c2_mapek_vs_baseline())),
        (3, "dispatcher properties", || Box::pin(c3_dispatcher())),
        (4, "lifecycle properties", || Box::pin(c4_lifecycle())),
        (5, "demand loading", || Box::pin(c5_demand())),
        (6, "ISC codec and ordering", || Box::pin(async { c6_codec() })),
        (7, "scheduler", || Box::pin(async { c7_scheduler() })),
        (8, "kernel servers", || Box::pin(async { c8_servers() })),
        (9, "observability", || Box::pin(c9_observability())),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| rt.block_on(check())))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    rt.shutdown_timeout(Duration::from_secs(5));
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

async fn boot_opts(cfg: KernelConfig, opts: BootOptions) -> Arc<KernelHandle> {
    boot_with(cfg, opts).await.expect("boot")
}

// ---- 1 ---------------------------------------------------------------------

const BENCH_REQUESTS: usize = 1000;
const BENCH_SE_FACTOR: f64 = 3.0;

async fn c1_bench() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let k = boot_default().await;
    let cfg = BenchConfig {
        requests: BENCH_REQUESTS,
        warmup: 100,
        out_dir: Some(dir.path().to_path_buf()),
        ..BenchConfig::default()
    };
    let out = bench::run_on(&k, testmod(), cfg.clone()).await;
    k.shutdown().await;
    let out = out.map_err(|e| e.to_string())?;
    let (a, b) = &out.reports;
    ensure!(a.requests == BENCH_REQUESTS && b.requests == BENCH_REQUESTS, "timed counts {} / {}", a.requests, b.requests);

    // Recompute everything from the raw files alone.
    let raw_a = bench::read_raw(&dir.path().join("bench-inprocess.lat")).map_err(|e| e.to_string())?;
    let raw_b = bench::read_raw(&dir.path().join("bench-subprocess.lat")).map_err(|e| e.to_string())?;
    ensure!(raw_a.len() == BENCH_REQUESTS && raw_b.len() == BENCH_REQUESTS, "raw file lengths");
    let med = |v: &[u64]| {
        let mut s = v.to_vec();
        s.sort_unstable();
        s[(s.len() + 1) / 2 - 1]
    };
    ensure!(med(&raw_a) == a.median_us && med(&raw_b) == b.median_us, "report medians differ from the raw files");
    let se = |v: &[u64], seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meds: Vec<f64> = (0..1000)
            .map(|_| {
                let r: Vec<u64> = (0..v.len()).map(|_| v[rng.gen_range(0..v.len())]).collect();
                med(&r) as f64
            })
            .collect();
        let m = meds.iter().sum::<f64>() / meds.len() as f64;
        (meds.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (meds.len() - 1) as f64).sqrt()
    };
    let (se_a, se_b) = (se(&raw_a, 11), se(&raw_b, 12));
    let se_gap = (se_a * se_a + se_b * se_b).sqrt();
    let gap = med(&raw_b) as f64 - med(&raw_a) as f64;
    let detail = format!(
        "InProcess median {} us, Subprocess median {} us, gap {gap:.0} us, SE {se_gap:.1} us",
        a.median_us, b.median_us
    );
    ensure!(a.median_us < b.median_us, "InProcess not faster: {detail}");
    ensure!(gap > BENCH_SE_FACTOR * se_gap, "gap within 3 SE: {detail}");
    ensure!(out.verdict.holds(), "harness verdict disagrees: {:?}", out.verdict);
    Ok(detail)
}

// ---- 2 ---------------------------------------------------------------------

const LEAK_CYCLES: usize = 60;
const LEAK_RATE: u64 = MIB;
const TESTMOD_BASE: u64 = 4 * MIB;
const LEAK_QUOTA: u64 = 16 * MIB;

/// Hand-simulation of the policy tables on the scripted memory series:
/// per cycle, one probe (memory += rate, quota check, replacement after
/// `threshold` consecutive failures) then one MAPE-K pass (leak rule:
/// `leak_cycles` strictly increasing steps growing at least `growth` of the
/// quota, answered by the compact hook, which resets memory and stops the
/// leak).
struct LeakOracle {
    actions: Vec<(usize, String)>,
    restarts: usize,
    leak_cycles_seen: Vec<usize>,
}

fn leak_oracle(mapek: bool, cycles: usize) -> LeakOracle {
    let (threshold, leak_steps, growth) = (3u32, 5usize, 0.20);
    let mut mem = TESTMOD_BASE;
    let mut rate = LEAK_RATE;
    let mut fails = 0;
    let mut series: Vec<u64> = Vec::new();
    let mut out = LeakOracle {
        actions: Vec::new(),
        restarts: 0,
        leak_cycles_seen: Vec::new(),
    };
    for cycle in 1..=cycles {
        mem += rate;
        series.push(mem);
        if mem > LEAK_QUOTA {
            fails += 1;
        } else {
            fails = 0;
        }
        if fails >= threshold {
            out.restarts += 1;
            mem = TESTMOD_BASE;
            fails = 0;
            series.clear();
        }
        let n = series.len();
        let mut inc = 0;
        while inc + 1 < n && series[n - 2 - inc] < series[n - 1 - inc] {
            inc += 1;
        }
        let grown = if inc > 0 { series[n - 1] - series[n - 1 - inc] } else { 0 };
        if inc >= leak_steps && grown as f64 >= growth * LEAK_QUOTA as f64 {
            out.leak_cycles_seen.push(cycle);
            if mapek {
                out.actions.push((cycle, "HealHook:compact".into()));
                mem = TESTMOD_BASE;
                rate = 0;
                series.clear();
            }
        }
    }
    out
}

struct LeakRun {
    actions: Vec<(usize, String)>,
    restarts: usize,
    leak_cycles_seen: Vec<usize>,
}

async fn leak_run(mode: RecoveryMode) -> Result<LeakRun, String> {
    let clock = ManualClock::new(1_700_000_000_000);
    let shared: SharedClock = clock.clone();
    let cfg = KernelConfig {
        mapek_enabled: mode == RecoveryMode::Mapek,
        ..KernelConfig::ephemeral()
    };
    let k = boot_opts(
        cfg,
        BootOptions {
            clock: Some(shared),
            ..BootOptions::manual()
        },
    )
    .await;
    k.services.set_mode(mode);
    let mut d = subprocess("leaky", "/leaky");
    d.quota.max_memory_bytes = LEAK_QUOTA;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    k.services
        .inject_fault(
            "leaky",
            FaultCommand {
                fault: Fault::Leak {
                    rate_bytes_per_cycle: LEAK_RATE,
                },
                seed: 1,
            },
        )
        .await
        .map_err(|e| e.to_string())?;
    let mut run = LeakRun {
        actions: Vec::new(),
        restarts: 0,
        leak_cycles_seen: Vec::new(),
    };
    for cycle in 1..=LEAK_CYCLES {
        clock.advance(1000);
        k.probe_tick().await;
        let before = k.mapek.executed().len();
        let report = k.mapek_tick().await;
        if report
            .symptoms
            .iter()
            .any(|s| s.module_id == "leaky" && s.class == muk::mapek::SymptomClass::MemoryLeak)
        {
            run.leak_cycles_seen.push(cycle);
        }
        for e in &k.mapek.executed()[before..] {
            run.actions.push((cycle, e.action.key()));
        }
    }
    run.restarts = k.services.restart_tally("leaky").map_err(|e| e.to_string())?;
    k.shutdown().await;
    Ok(run)
}

async fn c2_mapek_vs_baseline() -> Outcome {
    let mk = leak_run(RecoveryMode::Mapek).await?;
    let base = leak_run(RecoveryMode::Baseline).await?;
    let oracle_mk = leak_oracle(true, LEAK_CYCLES);
    let oracle_base = leak_oracle(false, LEAK_CYCLES);

    let last_leak = mk.leak_cycles_seen.last().copied();
    ensure!(
        last_leak.is_some_and(|c| c < LEAK_CYCLES),
        "(a) leak never settled under MAPE-K: symptom cycles {:?}",
        mk.leak_cycles_seen
    );
    ensure!(
        mk.restarts < base.restarts,
        "(b) restarts MAPE-K {} vs baseline {}",
        mk.restarts,
        base.restarts
    );
    ensure!(
        mk.actions == oracle_mk.actions,
        "(c) actions {:?}, oracle {:?}",
        mk.actions,
        oracle_mk.actions
    );
    ensure!(
        base.restarts == oracle_base.restarts && mk.restarts == oracle_mk.restarts,
        "restart counts {} / {} differ from oracle {} / {}",
        mk.restarts,
        base.restarts,
        oracle_mk.restarts,
        oracle_base.restarts
    );
    ensure!(base.actions.is_empty(), "baseline mode executed MAPE-K actions: {:?}", base.actions);
    Ok(format!(
        "last leak symptom at cycle {}, actions {:?}, restarts MAPE-K {} vs baseline {}",
        last_leak.unwrap_or(0),
        mk.actions,
        mk.restarts,
        base.restarts
    ))
}

// ---- 3 ---------------------------------------------------------------------

async fn c3_dispatcher() -> Outcome {
    let k = boot_default().await;
    let r = c3_inner(&k).await;
    k.shutdown().await;
    r
}

async fn c3_inner(k: &Arc<KernelHandle>) -> Outcome {
    // Exact round-robin fairness, n=3, k=100.
    let mut d = ModuleDescriptor::in_process("rr", "echo", "/rr");
    d.replicas_desired = 3;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..300 {
        let resp = k.dispatcher.dispatch(k.dispatcher.new_request("GET", "/rr", Vec::new())).await;
        ensure!(resp.status == 200, "rr status {}", resp.status);
        *counts.entry(resp.served_by.unwrap_or_default()).or_default() += 1;
    }
    ensure!(counts.len() == 3, "served by {} instances", counts.len());
    let spread = counts.values().max().unwrap() - counts.values().min().unwrap();
    ensure!(spread == 0, "round-robin spread {spread}: {counts:?}");

    // Fuzzed state flips: an Unhealthy instance is never picked.
    let mut d = ModuleDescriptor::in_process("fz", "echo", "/fz");
    d.replicas_desired = 5;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut served = 0;
    let mut unavailable = 0;
    for i in 0..10_000 {
        let live = k.services.live_instances("fz").map_err(|e| e.to_string())?;
        if rng.gen_bool(0.3) {
            let inst = &live[rng.gen_range(0..live.len())];
            match inst.state() {
                InstanceState::Ready => {
                    let _ = inst.transition(if rng.gen_bool(0.5) { InstanceState::Degraded } else { InstanceState::Unhealthy });
                }
                InstanceState::Degraded => {
                    let _ = inst.transition(if rng.gen_bool(0.5) { InstanceState::Ready } else { InstanceState::Unhealthy });
                }
                InstanceState::Unhealthy if rng.gen_bool(0.3) => {
                    let id = inst.snapshot().instance_id;
                    k.services.restart_instance(&id).await.map_err(|e| e.to_string())?;
                }
                _ => {}
            }
        }
        let live = k.services.live_instances("fz").map_err(|e| e.to_string())?;
        let states: HashMap<String, InstanceState> = live.iter().map(|i| (i.snapshot().instance_id, i.state())).collect();
        let any_serving = states.values().any(|s| s.is_serving());
        let resp = k.dispatcher.dispatch(k.dispatcher.new_request("GET", "/fz", Vec::new())).await;
        match resp.served_by {
            Some(id) => {
                let st = states.get(&id).copied();
                ensure!(
                    st.is_some_and(InstanceState::is_serving),
                    "dispatch {i} went to {id} in state {st:?}"
                );
                served += 1;
            }
            None => {
                ensure!(!any_serving && resp.status == 503, "dispatch {i}: {} with serving instances present", resp.status);
                unavailable += 1;
            }
        }
    }

    // Quota breach: 429s, and every request accounted for.
    let mut d = ModuleDescriptor::in_process("q", "fault-echo", "/q");
    d.quota.max_concurrent_requests = 2;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    k.services
        .inject_fault(
            "q",
            FaultCommand {
                fault: Fault::SlowDown { factor: 200.0 },
                seed: 0,
            },
        )
        .await
        .map_err(|e| e.to_string())?;
    let mut set = tokio::task::JoinSet::new();
    for _ in 0..10 {
        let disp = k.dispatcher.clone();
        set.spawn(async move { disp.dispatch(disp.new_request("GET", "/q", Vec::new())).await });
    }
    let mut statuses = Vec::new();
    let mut rids = HashSet::new();
    while let Some(r) = set.join_next().await {
        let r = r.map_err(|e| e.to_string())?;
        rids.insert(r.request_id.clone());
        statuses.push(r.status);
    }
    let n429 = statuses.iter().filter(|s| **s == 429).count();
    let n200 = statuses.iter().filter(|s| **s == 200).count();
    ensure!(n429 > 0 && n429 + n200 == 10, "quota statuses {statuses:?}");
    let rt = k.registry.runtime("q").map_err(|e| e.to_string())?;
    ensure!(rt.inflight.load(Ordering::SeqCst) == 0, "inflight not back to zero");
    let active: u64 = k.services.live_instances("q").map_err(|e| e.to_string())?.iter().map(|i| i.active_requests()).sum();
    ensure!(active == 0, "{active} active requests left");
    let io = k.monitor.io_where(|r| r.module_id == "q");
    let io_ids: HashSet<String> = io.iter().map(|r| r.request_id.clone()).collect();
    ensure!(io.len() == 10 && io_ids == rids, "{} IoRecords for 10 requests", io.len());
    ensure!(k.monitor.drops().io == 0, "IoRecords dropped");
    Ok(format!(
        "rr counts {:?}; fuzz {served} served, {unavailable} with nothing serving; quota {n429}x429 {n200}x200",
        counts.values().collect::<Vec<_>>()
    ))
}

// ---- 4 ---------------------------------------------------------------------

async fn c4_lifecycle() -> Outcome {
    let k = boot_default().await;
    let r = c4_inner(&k).await;
    k.shutdown().await;
    r
}

async fn c4_inner(k: &Arc<KernelHandle>) -> Outcome {
    let http = Http::default();
    let edge = k.listen_addr();

    k.services
        .register_module(ModuleDescriptor::in_process("ver", "version-echo", "/ver"))
        .await
        .map_err(|e| e.to_string())?;
    let (_, b1) = http.get(edge, "/ver").await;
    k.services.deploy("ver", "2.0.0", "version-echo").await.map_err(|e| e.to_string())?;
    let (_, b2) = http.get(edge, "/ver").await;
    k.services.rollback("ver").await.map_err(|e| e.to_string())?;
    let (_, b3) = http.get(edge, "/ver").await;
    ensure!(
        b1.contains("1.0.0") && b2.contains("2.0.0") && b3.contains("1.0.0"),
        "served versions: {b1} / {b2} / {b3}"
    );

    // 50 req/s during a rolling deploy of a two-replica subprocess module.
    let mut d = subprocess("roll", "/roll");
    d.replicas_desired = 2;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let prober = {
        let stop = stop.clone();
        tokio::spawn(async move {
            let http = Http::default();
            let mut tick = tokio::time::interval(Duration::from_millis(20));
            let mut statuses: BTreeMap<u16, usize> = BTreeMap::new();
            while !stop.load(Ordering::SeqCst) {
                tick.tick().await;
                let (s, _) = http.post(edge, "/roll", "p").await;
                *statuses.entry(s).or_default() += 1;
            }
            statuses
        })
    };
    tokio::time::sleep(Duration::from_millis(300)).await;
    let deployed = k.services.deploy("roll", "2.0.0", testmod()).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    stop.store(true, Ordering::SeqCst);
    let statuses = prober.await.map_err(|e| e.to_string())?;
    deployed.map_err(|e| e.to_string())?;
    let probes: usize = statuses.values().sum();
    ensure!(!statuses.contains_key(&503), "503s during rolling deploy: {statuses:?}");
    ensure!(statuses.keys().all(|s| *s == 200), "non-200 during rolling deploy: {statuses:?}");
    let versions: BTreeSet<String> = k
        .services
        .live_instances("roll")
        .map_err(|e| e.to_string())?
        .iter()
        .map(|i| i.version.clone())
        .collect();
    ensure!(versions.len() == 1 && versions.contains("2.0.0"), "versions after deploy {versions:?}");

    // Concurrent deploys: exactly one Active.
    k.services
        .register_module(ModuleDescriptor::in_process("cc", "version-echo", "/cc"))
        .await
        .map_err(|e| e.to_string())?;
    let mut set = tokio::task::JoinSet::new();
    for v in 2..=11 {
        let svc = k.services.clone();
        set.spawn(async move { svc.deploy("cc", &format!("{v}.0.0"), "version-echo").await.is_ok() });
    }
    let mut accepted = 0;
    while let Some(r) = set.join_next().await {
        if r.map_err(|e| e.to_string())? {
            accepted += 1;
        }
    }
    let deps = k.registry.deployments("cc").map_err(|e| e.to_string())?;
    let active: Vec<_> = deps.iter().filter(|d| d.status == DeploymentStatus::Active).collect();
    ensure!(active.len() == 1, "{} Active deployments", active.len());
    let (desc, _) = k.services.lookup("cc").map_err(|e| e.to_string())?;
    ensure!(active[0].version == desc.version, "Active {} but descriptor {}", active[0].version, desc.version);
    Ok(format!(
        "rollback served 1.0.0; {probes} probes during rolling deploy, all 200; {accepted}/10 concurrent deploys accepted, 1 Active ({})",
        desc.version
    ))
}

// ---- 5 ---------------------------------------------------------------------

const PROBE_INTERVAL_S: f64 = 1.0;
const IDLE_TTL_S: u64 = 2;

async fn c5_demand() -> Outcome {
    let cfg = KernelConfig {
        probe_interval_s: PROBE_INTERVAL_S,
        ..KernelConfig::ephemeral()
    };
    let k = boot_opts(cfg, BootOptions::default()).await;
    let r = c5_inner(&k).await;
    k.shutdown().await;
    r
}

fn kernel_servers_resident(k: &KernelHandle) -> Result<(), String> {
    for s in servers::ALL {
        let live = k.services.live_instances(s).map_err(|e| e.to_string())?;
        ensure!(live.len() == 1 && live[0].state().is_serving(), "{s} not resident");
    }
    Ok(())
}

async fn c5_inner(k: &Arc<KernelHandle>) -> Outcome {
    let mut d = subprocess("lazy", "/lazy");
    d.demand_loaded = true;
    d.idle_ttl_s = Some(IDLE_TTL_S);
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    let before = k.services.live_instances("lazy").map_err(|e| e.to_string())?.len();
    ensure!(before == 0, "{before} instances before traffic");

    let edge = k.listen_addr();
    let mut set = tokio::task::JoinSet::new();
    for i in 0..50 {
        set.spawn(async move { Http::default().post(edge, "/lazy", &format!("r{i}")).await.0 });
    }
    let mut statuses = Vec::new();
    while let Some(s) = set.join_next().await {
        statuses.push(s.map_err(|e| e.to_string())?);
    }
    let last_traffic = Instant::now();
    ensure!(statuses.iter().all(|s| *s == 200), "statuses {statuses:?}");
    let starts = k.registry.runtime("lazy").map_err(|e| e.to_string())?.starts.load(Ordering::SeqCst);
    ensure!(starts == 1, "{starts} starts under concurrent first requests");

    let limit = Duration::from_secs_f64(IDLE_TTL_S as f64 + 2.0 * PROBE_INTERVAL_S);
    loop {
        kernel_servers_resident(k)?;
        if k.services.live_instances("lazy").map_err(|e| e.to_string())?.is_empty() {
            break;
        }
        ensure!(last_traffic.elapsed() <= limit, "not evicted {:?} after last request", last_traffic.elapsed());
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let evicted_after = last_traffic.elapsed();
    k.services.evict_idle(k.clock.now_ms() + 86_400_000).await;
    kernel_servers_resident(k)?;
    Ok(format!(
        "0 instances before traffic, 1 start for 50 concurrent requests, evicted {:.2}s after last request (limit {:.0}s)",
        evicted_after.as_secs_f64(),
        limit.as_secs_f64()
    ))
}

// ---- 6 ---------------------------------------------------------------------

fn random_envelope(rng: &mut ChaCha8Rng) -> Envelope {
    let text = |rng: &mut ChaCha8Rng, max: usize| -> String {
        let n = rng.gen_range(0..=max);
        (0..n)
            .map(|_| match rng.gen_range(0..4) {
                0 => rng.gen_range('a'..='z'),
                1 => rng.gen_range('0'..='9'),
                2 => ['"', '\\', '/', ' ', '\n', '\u{7f}'][rng.gen_range(0..6)],
                _ => char::from_u32(rng.gen_range(0x80..0x3000)).unwrap_or('é'),
            })
            .collect()
    };
    let kind = Kind::ALL[rng.gen_range(0..Kind::ALL.len())];
    let body_len = if rng.gen_bool(0.05) { rng.gen_range(0..70_000) } else { rng.gen_range(0..300) };
    let mut id = text(rng, 20);
    id.push('x');
    let mut corr = text(rng, 20);
    if kind == Kind::Reply {
        corr.push('c');
    }
    Envelope {
        id,
        correlation_id: corr,
        source: text(rng, 16),
        destination: text(rng, 16),
        kind,
        content_type: text(rng, 12),
        body: (0..body_len).map(|_| rng.gen()).collect(),
        ttl_ms: rng.gen_range(1..=u64::MAX / 2),
        created_at: rng.gen(),
    }
}

fn c6_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..10_000 {
        let env = random_envelope(&mut rng);
        let a = encode(&env).map_err(|e| format!("encode {i}: {e}"))?;
        let b = encode(&env).map_err(|e| format!("encode {i}: {e}"))?;
        ensure!(a == b, "envelope {i} encodes non-deterministically");
        let back = decode(&a).map_err(|e| format!("decode {i}: {e}"))?;
        ensure!(back == env, "envelope {i} does not round-trip");
        ensure!(encode(&back).map_err(|e| e.to_string())? == a, "re-encoding {i} changed bytes");
    }

    let bus = Bus::new("acceptance", muk::clock::system());
    let sub = bus.subscribe("fifo", "checker");
    let publishers: Vec<_> = (0..4)
        .map(|p| {
            let bus = bus.clone();
            std::thread::spawn(move || {
                for n in 0..1000u32 {
                    bus.publish("fifo", format!("{p}:{n}").into_bytes()).expect("publish");
                }
            })
        })
        .collect();
    let mut last: HashMap<u32, i64> = HashMap::new();
    let mut got = 0;
    while got < 4000 {
        let env = sub
            .recv_timeout(Duration::from_secs(5))
            .ok_or_else(|| format!("only {got} of 4000 messages arrived"))?;
        let s = String::from_utf8(env.body).map_err(|e| e.to_string())?;
        let (p, n) = s.split_once(':').ok_or("bad body")?;
        let (p, n): (u32, i64) = (p.parse().map_err(|_| "bad p")?, n.parse().map_err(|_| "bad n")?);
        let prev = last.insert(p, n).unwrap_or(-1);
        ensure!(n == prev + 1, "publisher {p}: {n} after {prev}");
        got += 1;
    }
    for h in publishers {
        h.join().map_err(|_| "publisher panicked")?;
    }
    ensure!(sub.try_recv().is_none(), "extra messages");
    Ok("10000 envelopes round-trip byte-identically; 4x1000 messages in per-publisher order".into())
}

// ---- 7 ---------------------------------------------------------------------

const REAP_MAX_RUNTIME_MS: u64 = 100;
const HOUSEKEEPING_MS: u64 = 100;

fn c7_scheduler() -> Outcome {
    // Reference: a sorted set keyed by (descending priority, submission order).
    let s = Scheduler::manual(muk::clock::system(), None);
    let mut oracle: BTreeSet<(std::cmp::Reverse<u8>, u64, String)> = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seq = 0u64;
    let mut pops = 0;
    for i in 0..10_000 {
        let prio: u8 = rng.gen_range(0..=9);
        let id = format!("t{i}");
        s.submit(TaskSpec::new(id.clone(), prio, Box::new(|_| Step::Done)))
            .map_err(|e| e.to_string())?;
        oracle.insert((std::cmp::Reverse(prio), seq, id));
        seq += 1;
        while rng.gen_bool(0.45) && !oracle.is_empty() {
            let want = oracle.pop_first().unwrap();
            let got = s.next().map_err(|e| e.to_string())?;
            ensure!(got.task_id == want.2, "pop {pops}: got {} want {}", got.task_id, want.2);
            s.run_quantum(&got.task_id).map_err(|e| e.to_string())?;
            pops += 1;
        }
    }
    while let Some(want) = oracle.pop_first() {
        let got = s.next().map_err(|e| e.to_string())?;
        ensure!(got.task_id == want.2, "drain: got {} want {}", got.task_id, want.2);
        s.run_quantum(&got.task_id).map_err(|e| e.to_string())?;
        pops += 1;
    }
    let ledger = s.ledger();
    ensure!(ledger.balances() && ledger.submitted == 10_000 && ledger.completed == 10_000, "ledger {ledger:?}");

    // A stalled task is reaped within two housekeeping ticks.
    let s = Scheduler::start(muk::clock::system(), None, Duration::from_millis(HOUSEKEEPING_MS));
    let started: Arc<parking_lot::Mutex<Option<Instant>>> = Arc::default();
    let mark = started.clone();
    s.submit(
        TaskSpec::new(
            "stall",
            5,
            Box::new(move |_| {
                *mark.lock() = Some(Instant::now());
                std::thread::sleep(Duration::from_secs(2));
                Step::Done
            }),
        )
        .quantum(REAP_MAX_RUNTIME_MS)
        .max_runtime(REAP_MAX_RUNTIME_MS),
    )
    .map_err(|e| e.to_string())?;
    for i in 0..20 {
        s.submit(TaskSpec::new(format!("bg{i}"), 1, Box::new(|_| Step::Done)))
            .map_err(|e| e.to_string())?;
    }
    let deadline = Instant::now() + Duration::from_secs(3);
    while s.task("stall").map(|t| t.state) != Some(TaskState::Reaped) {
        ensure!(Instant::now() < deadline, "stalled task not reaped");
        std::thread::sleep(Duration::from_millis(2));
    }
    let reaped_at = Instant::now();
    let t0 = started.lock().ok_or("stalled task never started")?;
    let over = reaped_at.duration_since(t0).saturating_sub(Duration::from_millis(REAP_MAX_RUNTIME_MS));
    ensure!(
        over <= Duration::from_millis(2 * HOUSEKEEPING_MS),
        "reaped {over:?} after exceeding max_runtime"
    );
    let deadline = Instant::now() + Duration::from_secs(2);
    while s.ledger().pending > 0 {
        ensure!(Instant::now() < deadline, "queue did not drain after reap: {:?}", s.ledger());
        std::thread::sleep(Duration::from_millis(5));
    }
    let l2 = s.ledger();
    s.stop();
    ensure!(l2.balances() && l2.reaped == 1 && l2.completed == 20, "ledger after reap {l2:?}");
    Ok(format!(
        "{pops} pops match the oracle; reaped {} ms past max_runtime; ledgers {}/{} balance",
        over.as_millis(),
        ledger.submitted,
        l2.submitted
    ))
}

// ---- 8 ---------------------------------------------------------------------

fn c8_servers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let signer = TokenSigner::new(b"acceptance-secret");
    let token = signer.issue(&Claims {
        user_id: "alice".into(),
        roles: vec!["viewer".into()],
        exp: 4_000_000_000,
    });
    signer.verify(&token, 0).map_err(|e| format!("pristine token rejected: {e}"))?;
    let mut accepted = 0;
    for _ in 0..1000 {
        let mut b = token.clone().into_bytes();
        let i = rng.gen_range(0..b.len());
        b[i] ^= 1 << rng.gen_range(0..7);
        let t = String::from_utf8(b).map_err(|e| e.to_string())?;
        if signer.verify(&t, 0).is_ok() {
            accepted += 1;
        }
    }
    ensure!(accepted == 0, "{accepted} of 1000 flipped tokens verified");

    let clock = ManualClock::new(1_000_000);
    let sessions = SessionStore::new(clock.clone());
    let s = sessions.create("u", 1).map_err(|e| e.to_string())?;
    clock.advance(2000);
    ensure!(sessions.get(&s.session_id) == Err(servers::ServerError::Expired), "1 s session alive after 2 s");
    let s = sessions.create("u", 1).map_err(|e| e.to_string())?;
    for i in 0..100 {
        clock.advance(400);
        sessions.get(&s.session_id).map_err(|e| format!("touch {i}: {e}"))?;
    }

    let mut creds = CredentialStore::default();
    creds.add_user("alice", "pw", &["viewer"]);
    let auth = AuthServer::new(clock.clone(), AuthConfig::default(), b"k", creds);
    for i in 0..5 {
        ensure!(auth.login("alice", "wrong") == Err(servers::ServerError::BadCredentials), "login {i}");
    }
    ensure!(auth.login("alice", "pw") == Err(servers::ServerError::RateLimited), "6th login not denied");

    let mismatches = validation_vs_oracle(&mut rng, 1000);
    ensure!(mismatches.is_empty(), "validation mismatches: {:?}", &mismatches[..mismatches.len().min(3)]);

    for sched in 0..100 {
        shaper_schedule(&mut rng).map_err(|e| format!("schedule {sched}: {e}"))?;
    }
    Ok("1000/1000 flips rejected; ttl 1 s expiry and 100 touches ok; 6th login denied; 1000 records match; 100 shaper schedules conserve".into())
}

fn rules_fixture() -> Vec<Rule> {
    vec![
        Rule::Required { field: "email".into() },
        Rule::Format {
            field: "email".into(),
            format: Format::Email,
        },
        Rule::Required { field: "age".into() },
        Rule::Type {
            field: "age".into(),
            kind: FieldKind::Integer,
        },
        Rule::Length {
            field: "name".into(),
            min: 2,
            max: 8,
        },
        Rule::Format {
            field: "start".into(),
            format: Format::Date,
        },
        Rule::CrossField {
            predicate: "less_or_equal".into(),
            field: "start".into(),
            other: "end".into(),
        },
        Rule::Type {
            field: "tags".into(),
            kind: FieldKind::Array,
        },
        Rule::Length {
            field: "tags".into(),
            min: 0,
            max: 3,
        },
        Rule::Custom {
            field: "code".into(),
            predicate: "even".into(),
        },
    ]
}

fn oracle_email(s: &str) -> bool {
    let parts: Vec<&str> = s.split('@').collect();
    parts.len() == 2
        && !parts[0].is_empty()
        && parts[1].contains('.')
        && !parts[1].starts_with('.')
        && !parts[1].ends_with('.')
        && !s.contains(char::is_whitespace)
}

fn oracle_date(s: &str) -> bool {
    let p: Vec<&str> = s.split('-').collect();
    if p.len() != 3 || p[0].len() != 4 || p[1].len() != 2 || p[2].len() != 2 || !s.chars().all(|c| c.is_ascii_digit() || c == '-') {
        return false;
    }
    let (y, m, d): (i32, u32, u32) = (p[0].parse().unwrap(), p[1].parse().unwrap(), p[2].parse().unwrap());
    let next_month = if m == 12 { (y + 1, 1) } else { (y, m + 1) };
    if !(1..=12).contains(&m) || d == 0 {
        return false;
    }
    // Days in month from the day-count difference of month starts.
    let days_from_civil = |y: i32, m: u32| -> i64 {
        let y = if m <= 2 { y - 1 } else { y } as i64;
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let mp = (m as i64 + 9) % 12;
        let doy = (153 * mp + 2) / 5;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe
    };
    d as i64 <= days_from_civil(next_month.0, next_month.1) - days_from_civil(y, m)
}

/// Independent rule-by-rule expectation for [`rules_fixture`].
fn oracle_failures(r: &Map<String, Value>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let present = |k: &str| r.get(k);
    let mut push = |f: &str, rule: &str| out.push((f.to_string(), rule.to_string()));
    if !matches!(present("email"), Some(v) if !v.is_null()) {
        push("email", "Required");
    }
    if let Some(v) = present("email") {
        if !v.as_str().is_some_and(oracle_email) {
            push("email", "Format");
        }
    }
    if !matches!(present("age"), Some(v) if !v.is_null()) {
        push("age", "Required");
    }
    if let Some(v) = present("age") {
        if !(v.is_i64() || v.is_u64()) {
            push("age", "Type");
        }
    }
    if let Some(v) = present("name") {
        let ok = match v {
            Value::String(s) => (2..=8).contains(&s.chars().count()),
            Value::Array(a) => (2..=8).contains(&a.len()),
            _ => false,
        };
        if !ok {
            push("name", "Length");
        }
    }
    if let Some(v) = present("start") {
        if !v.as_str().is_some_and(oracle_date) {
            push("start", "Format");
        }
    }
    if let (Some(a), Some(b)) = (present("start"), present("end")) {
        let ok = match (a, b) {
            (Value::String(x), Value::String(y)) => x <= y,
            (Value::Number(x), Value::Number(y)) => x.as_f64().unwrap() <= y.as_f64().unwrap(),
            _ => false,
        };
        if !ok {
            push("start", "CrossField");
        }
    }
    if let Some(v) = present("tags") {
        if !v.is_array() {
            push("tags", "Type");
        }
        let ok = match v {
            Value::String(s) => s.chars().count() <= 3,
            Value::Array(a) => a.len() <= 3,
            _ => false,
        };
        if !ok {
            push("tags", "Length");
        }
    }
    if let Some(v) = present("code") {
        if !v.as_i64().is_some_and(|n| n % 2 == 0) {
            push("code", "Custom");
        }
    }
    out
}

fn random_record(rng: &mut ChaCha8Rng) -> Map<String, Value> {
    let mut m = Map::new();
    let mut maybe = |rng: &mut ChaCha8Rng, k: &str, v: Value| {
        if rng.gen_bool(0.8) {
            m.insert(k.to_string(), v);
        }
    };
    let emails = ["a@b.co", "nobody", "x@y", "@b.co", "a@@b.co", "a b@c.de", "q@.com", "ok@ex.org."];
    let v = match rng.gen_range(0..4) {
        0 => Value::Null,
        1 => json!(rng.gen_range(0..10)),
        _ => json!(emails[rng.gen_range(0..emails.len())]),
    };
    maybe(rng, "email", v);
    let v = match rng.gen_range(0..4) {
        0 => json!(rng.gen_range(-5..120)),
        1 => json!(rng.gen_range(0.0..3.0)),
        2 => json!("42"),
        _ => Value::Null,
    };
    maybe(rng, "age", v);
    let len = rng.gen_range(0..11);
    let v = if rng.gen_bool(0.8) { json!("é".repeat(len)) } else { json!(vec![1; len]) };
    maybe(rng, "name", v);
    let dates = ["2024-02-29", "2023-02-29", "2024-13-01", "2024-04-31", "1999-12-31", "20240101", "2024-1-01", "0000-01-01"];
    let v = json!(dates[rng.gen_range(0..dates.len())]);
    maybe(rng, "start", v);
    let v = if rng.gen_bool(0.8) { json!(dates[rng.gen_range(0..dates.len())]) } else { json!(7) };
    maybe(rng, "end", v);
    let v = if rng.gen_bool(0.7) {
        json!(vec!["t"; rng.gen_range(0..6)])
    } else {
        json!("abcd"[..rng.gen_range(0..5)])
    };
    maybe(rng, "tags", v);
    let v = if rng.gen_bool(0.8) { json!(rng.gen_range(-10..10)) } else { json!("2") };
    maybe(rng, "code", v);
    m
}

fn validation_vs_oracle(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let rules = rules_fixture();
    let even: muk::servers::validate::Predicate = Arc::new(|v: &Value| v.as_i64().is_some_and(|n| n % 2 == 0));
    let mut mismatches = Vec::new();
    for i in 0..n {
        let rec = random_record(rng);
        let got: Vec<(String, String)> = evaluate(&rec, &rules, |name| (name == "even").then(|| even.clone()))
            .failures
            .into_iter()
            .map(|f| (f.field, f.rule))
            .collect();
        let want = oracle_failures(&rec);
        if got != want {
            mismatches.push(format!("record {i} {}: got {got:?} want {want:?}", Value::Object(rec)));
        }
    }
    mismatches
}

/// One random debounce/throttle/plain schedule on a virtual clock, checked
/// for conservation and against directly counted expectations.
fn shaper_schedule(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut sh = Shaper::default();
    let window = rng.gen_range(5..50);
    let mut now = 0u64;
    let mut deb_times = Vec::new();
    let mut thr_times = Vec::new();
    let mut plain = 0;
    for _ in 0..rng.gen_range(1..200) {
        now += rng.gen_range(0..window * 2);
        for _ in sh.due(now) {}
        match rng.gen_range(0..3) {
            0 => {
                sh.debounce("d", vec![], window, now);
                deb_times.push(now);
            }
            1 => {
                sh.throttle("t", vec![], window, now);
                thr_times.push(now);
            }
            _ => {
                sh.plain("p");
                plain += 1;
            }
        }
        for (topic, c) in sh.all_counts() {
            ensure!(c.emitted == c.published + c.dropped + c.pending, "{topic} not conserved: {c:?}");
        }
    }
    sh.due(u64::MAX / 2);
    // A debounce burst ends when the next event comes a full window later.
    let bursts = deb_times.windows(2).filter(|w| w[1] >= w[0] + window).count() + usize::from(!deb_times.is_empty());
    let mut leading = 0;
    let mut open: Option<u64> = None;
    for &t in &thr_times {
        if open.is_none_or(|s| t >= s + window) {
            open = Some(t);
            leading += 1;
        }
    }
    let d = sh.counts("d");
    let t = sh.counts("t");
    let p = sh.counts("p");
    ensure!(d.pending == 0 && d.emitted as usize == deb_times.len() && d.published as usize == bursts, "debounce {d:?}, {bursts} bursts");
    ensure!(d.emitted == d.published + d.dropped, "debounce not conserved {d:?}");
    ensure!(t.emitted as usize == thr_times.len() && t.published as usize == leading && t.emitted == t.published + t.dropped, "throttle {t:?}, {leading} leading edges");
    ensure!(p.published == plain && p.emitted == plain, "plain {p:?}");
    Ok(())
}

// ---- 9 ---------------------------------------------------------------------

async fn c9_observability() -> Outcome {
    let k = boot_default().await;
    let r = c9_inner(&k).await;
    k.shutdown().await;
    let alerts = alert_fixture()?;
    r.map(|d| format!("{d}; {alerts}"))
}

async fn c9_inner(k: &Arc<KernelHandle>) -> Outcome {
    k.services
        .register_module(ModuleDescriptor::in_process("obs", "echo", "/obs"))
        .await
        .map_err(|e| e.to_string())?;
    let mut d = ModuleDescriptor::in_process("flaky", "fault-echo", "/flaky");
    d.replicas_desired = 1;
    k.services.register_module(d).await.map_err(|e| e.to_string())?;
    k.services
        .inject_fault(
            "flaky",
            FaultCommand {
                fault: Fault::ErrorRate { p: 0.3 },
                seed: 9,
            },
        )
        .await
        .map_err(|e| e.to_string())?;
    let io_before: HashSet<String> = k.monitor.io_where(|_| true).into_iter().map(|r| r.request_id).collect();
    let http = Http::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rids = Vec::new();
    for i in 0..1000 {
        let path = match rng.gen_range(0..10) {
            0 => "/nowhere",
            1..=3 => "/flaky",
            _ => "/obs",
        };
        let r = http
            .client
            .post(format!("http://{}{path}", k.listen_addr()))
            .body(format!("{i}"))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let rid = r
            .headers()
            .get("x-muk-request-id")
            .and_then(|v| v.to_str().ok())
            .ok_or("no request id header")?
            .to_string();
        rids.push((rid, r.status().as_u16()));
    }
    let io: Vec<_> = k.monitor.io_where(|r| !io_before.contains(&r.request_id));
    let mut by_id: HashMap<&str, Vec<u16>> = HashMap::new();
    for r in &io {
        by_id.entry(r.request_id.as_str()).or_default().push(r.output_status);
    }
    ensure!(io.len() == 1000, "{} IoRecords for 1000 requests", io.len());
    for (rid, status) in &rids {
        match by_id.get(rid.as_str()) {
            Some(v) if v.len() == 1 && v[0] == *status => {}
            other => return Err(format!("request {rid} ({status}) maps to {other:?}")),
        }
    }

    // A failed upstream: the subprocess dies before the request arrives.
    k.services.register_module(subprocess("doomed", "/doomed")).await.map_err(|e| e.to_string())?;
    k.services
        .inject_fault(
            "doomed",
            FaultCommand {
                fault: Fault::CrashLoop,
                seed: 0,
            },
        )
        .await
        .map_err(|e| e.to_string())?;
    tokio::time::sleep(Duration::from_millis(800)).await;
    let resp = k.dispatcher.dispatch(k.dispatcher.new_request("POST", "/doomed", b"x".to_vec())).await;
    ensure!(resp.status >= 500, "dead upstream answered {}", resp.status);
    let trace = k.monitor.trace_request(&resp.request_id);
    let last = trace.last().ok_or("empty trace")?;
    ensure!(last.error, "trace ends in a non-error event: {trace:?}");
    Ok(format!(
        "1000 requests <-> 1000 IoRecords; failed upstream ({}) trace of {} events ends in error",
        resp.status,
        trace.len()
    ))
}

fn alert_fixture() -> Result<String, String> {
    let bus = Bus::new("alerts-fixture", muk::clock::system());
    let sub = bus.subscribe(ALERTS_TOPIC, "fixture");
    let mon = Monitor::new(MonitorConfig::default(), Some(bus)).map_err(|e| e.to_string())?;
    mon.upsert_rule(AlertRule {
        rule_id: "slow".into(),
        metric: Metric::LatencyUs,
        aggregation: Aggregation::Max,
        window_s: 1,
        threshold: 100.0,
        direction: Direction::Above,
        target: "*".into(),
    })
    .map_err(|e| e.to_string())?;
    let sample = |at, value| MetricSample {
        at,
        module_id: "m".into(),
        instance_id: "m-1".into(),
        metric: Metric::LatencyUs,
        value,
    };
    let mut events = 0;
    // breach, still breaching, clear, breach
    for (at, value) in [(1_000, 500.0), (1_500, 400.0), (3_000, 10.0), (5_000, 500.0)] {
        mon.record_sample(sample(at, value));
        events += mon.evaluate_alerts(at).len();
    }
    let published = sub.drain().len();
    ensure!(events == 2 && published == 2, "{events} events, {published} published");
    Ok("breach-clear-breach emitted exactly 2 alerts".into())
}
