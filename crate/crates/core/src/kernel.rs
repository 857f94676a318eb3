//! Boot and shutdown: wires every component together and owns the
//! listeners and periodic tasks.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::Notify;
use tokio::task::JoinHandle;

use crate::clock::{self, SharedClock};
use crate::config::KernelConfig;
use crate::dispatcher::Dispatcher;
use crate::error::{KResult, KernelError};
use crate::feed::EventFeed;
use crate::handler::HandlerRegistry;
use crate::isc::Bus;
use crate::mapek::{self, Mapek, MapekConfig};
use crate::monitor::{Level, Monitor, MonitorConfig, ALERTS_TOPIC};
use crate::registry::Registry;
use crate::scheduler::{Scheduler, Step, TaskObserver};
use crate::servers::{AuthConfig, CredentialStore, KernelServers, ServersConfig};
use crate::service::{RecoveryMode, ServiceManager, SupervisorConfig};

/// Secret used when neither the config nor `MUK_SECRET` provides one.
const FALLBACK_SECRET: &str = "muk-development-secret";

/// Knobs that tests and embedders may override; `Default` is what `mukd`
/// uses.
#[derive(Clone)]
pub struct BootOptions {
    pub clock: Option<SharedClock>,
    pub handlers: Option<HandlerRegistry>,
    pub supervisor: Option<SupervisorConfig>,
    pub mapek: Option<MapekConfig>,
    pub monitor: Option<MonitorConfig>,
    pub credentials: Option<CredentialStore>,
    /// Run probe, MAPE-K, alert and session sweeps on the scheduler. Tests
    /// that drive ticks by hand turn this off.
    pub background: bool,
}

impl Default for BootOptions {
    fn default() -> Self {
        Self {
            clock: None,
            handlers: None,
            supervisor: None,
            mapek: None,
            monitor: None,
            credentials: None,
            background: true,
        }
    }
}

impl BootOptions {
    pub fn manual() -> Self {
        Self {
            background: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ShutdownReport {
    pub already_shut_down: bool,
    pub stopped: Vec<String>,
    pub failures: Vec<String>,
}

pub struct KernelHandle {
    pub cfg: KernelConfig,
    pub clock: SharedClock,
    pub bus: Bus,
    pub monitor: Arc<Monitor>,
    pub registry: Arc<Registry>,
    pub services: Arc<ServiceManager>,
    pub dispatcher: Arc<Dispatcher>,
    pub scheduler: Scheduler,
    pub mapek: Arc<Mapek>,
    pub servers: Arc<KernelServers>,
    pub handlers: HandlerRegistry,
    pub feed: Arc<EventFeed>,
    listen_addr: SocketAddr,
    admin_addr: SocketAddr,
    stop: Arc<Notify>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    shut: AtomicBool,
}

impl std::fmt::Debug for KernelHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelHandle")
            .field("listen_addr", &self.listen_addr)
            .field("admin_addr", &self.admin_addr)
            .finish_non_exhaustive()
    }
}

struct MonitorObserver {
    monitor: Arc<Monitor>,
    clock: SharedClock,
}

impl TaskObserver for MonitorObserver {
    fn task_failed(&self, task_id: &str, error: &str) {
        self.monitor
            .log(self.clock.now_ms(), Level::Error, "scheduler", format!("task {task_id} failed: {error}"), None);
    }

    fn task_reaped(&self, task_id: &str, runtime_ms: u64) {
        self.monitor.raise(
            self.clock.now_ms(),
            "task-reaped",
            task_id,
            format!("task {task_id} reaped after {runtime_ms} ms"),
        );
    }
}

fn bind(addr: &str) -> KResult<std::net::TcpListener> {
    let l = std::net::TcpListener::bind(addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => KernelError::AddrInUse(addr.to_string()),
        _ => KernelError::Io(format!("bind {addr}: {e}")),
    })?;
    l.set_nonblocking(true).map_err(|e| KernelError::Io(e.to_string()))?;
    Ok(l)
}

pub async fn boot(cfg: KernelConfig) -> KResult<Arc<KernelHandle>> {
    boot_with(cfg, BootOptions::default()).await
}

pub async fn boot_with(cfg: KernelConfig, opts: BootOptions) -> KResult<Arc<KernelHandle>> {
    cfg.validate()?;
    let edge_listener = bind(&cfg.listen_addr)?;
    let admin_listener = bind(&cfg.admin_addr)?;
    let listen_addr = edge_listener.local_addr().map_err(|e| KernelError::Io(e.to_string()))?;
    let admin_addr = admin_listener.local_addr().map_err(|e| KernelError::Io(e.to_string()))?;

    let clock = opts.clock.clone().unwrap_or_else(clock::system);
    let bus = Bus::new("kernel", clock.clone());
    let mut mon_cfg = opts.monitor.clone().unwrap_or_default();
    if mon_cfg.history_path.is_none() {
        mon_cfg.history_path = cfg.history_path.clone();
    }
    let monitor = Arc::new(Monitor::new(mon_cfg, Some(bus.clone())).map_err(|e| KernelError::Io(format!("monitor history: {e}")))?);
    let registry = Arc::new(Registry::new());
    let handlers = opts.handlers.clone().unwrap_or_else(HandlerRegistry::with_builtins);

    let scheduler = Scheduler::start(clock.clone(), Some(bus.clone()), Duration::from_millis(cfg.housekeeping_ms));
    scheduler.set_observer(Arc::new(MonitorObserver {
        monitor: monitor.clone(),
        clock: clock.clone(),
    }));

    let creds = match (&opts.credentials, &cfg.credentials_path) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => CredentialStore::load(p).map_err(|_| KernelError::InvalidConfig("credentials_path".into()))?,
        (None, None) => CredentialStore::default(),
    };
    let secret = cfg.secret.clone().unwrap_or_else(|| FALLBACK_SECRET.to_string());
    let servers = KernelServers::new(
        clock.clone(),
        bus.clone(),
        Some(scheduler.clone()),
        secret.as_bytes(),
        creds,
        ServersConfig {
            session_ttl_s: cfg.session_ttl_s,
            auth: AuthConfig {
                token_ttl_s: cfg.token_ttl_s,
                login_limit: cfg.login_rate_limit,
                login_window_s: cfg.login_rate_window_s,
            },
        },
    );
    servers.install(&handlers);

    let mut sup = opts.supervisor.clone().unwrap_or_default();
    sup.failure_threshold = cfg.probe_failure_threshold;
    sup.max_replicas = cfg.max_replicas;
    let mode = if cfg.mapek_enabled {
        RecoveryMode::Mapek
    } else {
        RecoveryMode::Baseline
    };
    let services = ServiceManager::new(
        registry.clone(),
        monitor.clone(),
        handlers.clone(),
        clock.clone(),
        bus.clone(),
        sup,
        mode,
    );
    for desc in KernelServers::descriptors() {
        services.register_kernel_server(desc).await?;
    }
    if let Some(path) = &cfg.registry_path {
        if path.exists() {
            let saved = Registry::load_file(path).map_err(|e| KernelError::Io(format!("registry file: {e}")))?;
            for m in saved.modules {
                let id = m.descriptor.module_id.clone();
                if let Err(e) = services.restore_module(m).await {
                    monitor.log(clock.now_ms(), Level::Error, "kernel", format!("could not restore {id}: {e}"), None);
                }
            }
        }
    }

    let dispatcher = Arc::new(Dispatcher::new(
        services.clone(),
        clock.clone(),
        Duration::from_millis(cfg.upstream_timeout_ms),
    ));
    let mut mk_cfg = opts.mapek.clone().unwrap_or_default();
    if mk_cfg.knowledge_path.is_none() {
        mk_cfg.knowledge_path = cfg.knowledge_path.clone();
    }
    let mapek = Mapek::new(services.clone(), clock.clone(), Some(bus.clone()), mk_cfg)
        .map_err(|e| KernelError::Io(format!("knowledge file: {e}")))?;

    let k = Arc::new(KernelHandle {
        cfg: cfg.clone(),
        clock: clock.clone(),
        bus: bus.clone(),
        monitor: monitor.clone(),
        registry,
        services: services.clone(),
        dispatcher: dispatcher.clone(),
        scheduler: scheduler.clone(),
        mapek,
        servers,
        handlers,
        feed: Arc::new(EventFeed::default()),
        listen_addr,
        admin_addr,
        stop: Arc::new(Notify::new()),
        tasks: Mutex::new(Vec::new()),
        shut: AtomicBool::new(false),
    });

    k.start_feed();
    if opts.background {
        k.start_periodic();
    }
    k.serve(edge_listener, crate::dispatcher::edge_router(dispatcher))?;
    k.serve(admin_listener, crate::admin::router(k.clone()))?;
    monitor.log(
        clock.now_ms(),
        Level::Info,
        "kernel",
        format!("booted: edge {listen_addr}, admin {admin_addr}, mode {}", mode.as_str()),
        None,
    );
    Ok(k)
}

impl KernelHandle {
    pub fn listen_addr(&self) -> SocketAddr {
        self.listen_addr
    }

    pub fn admin_addr(&self) -> SocketAddr {
        self.admin_addr
    }

    pub fn is_shut_down(&self) -> bool {
        self.shut.load(Ordering::SeqCst)
    }

    fn serve(&self, listener: std::net::TcpListener, app: axum::Router) -> KResult<()> {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| KernelError::Io(e.to_string()))?;
        let stop = self.stop.clone();
        let t = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async move { stop.notified().await })
                .await;
        });
        self.tasks.lock().push(t);
        Ok(())
    }

    fn start_feed(&self) {
        for topic in [ALERTS_TOPIC, mapek::TOPIC] {
            let sub = self.bus.subscribe(topic, "admin-feed");
            let feed = self.feed.clone();
            let clock = self.clock.clone();
            let t = tokio::spawn(async move {
                while let Some(env) = sub.recv().await {
                    let body = serde_json::from_slice(&env.body).unwrap_or(serde_json::Value::Null);
                    feed.push(clock.now_ms(), topic, body);
                }
            });
            self.tasks.lock().push(t);
        }
    }

    /// Registers a periodic job that spawns `job` onto the runtime unless
    /// the previous run is still going.
    fn periodic<F, Fut>(&self, name: &str, priority: u8, period: Duration, job: F)
    where
        F: Fn() -> Fut + Send + Sync + 'static,
        Fut: std::future::Future<Output = ()> + Send + 'static,
    {
        let rt = tokio::runtime::Handle::current();
        let busy = Arc::new(AtomicBool::new(false));
        self.scheduler.every(name, priority, period, Duration::from_millis(500), move || {
            if !busy.swap(true, Ordering::SeqCst) {
                let busy = busy.clone();
                let fut = job();
                rt.spawn(async move {
                    fut.await;
                    busy.store(false, Ordering::SeqCst);
                });
            }
            Step::Done
        });
    }

    fn start_periodic(&self) {
        let svc = self.services.clone();
        self.periodic("probe", 7, self.cfg.probe_interval(), move || {
            let svc = svc.clone();
            async move {
                svc.probe_all().await;
            }
        });
        let mk = self.mapek.clone();
        self.periodic("mapek", 8, self.cfg.mapek_period(), move || {
            let mk = mk.clone();
            async move {
                mk.run_cycle().await;
            }
        });
        let mon = self.monitor.clone();
        let clock = self.clock.clone();
        self.periodic("alerts", 6, Duration::from_secs(1), move || {
            let (mon, clock) = (mon.clone(), clock.clone());
            async move {
                mon.evaluate_alerts(clock.now_ms());
            }
        });
        let servers = self.servers.clone();
        self.periodic("session-sweep", 2, Duration::from_secs(30), move || {
            let servers = servers.clone();
            async move {
                servers.sessions.purge_expired();
            }
        });
    }

    /// One probe sweep, for callers that drive the kernel by hand.
    pub async fn probe_tick(&self) -> crate::service::ProbeSweep {
        self.services.probe_all().await
    }

    pub async fn mapek_tick(&self) -> mapek::CycleReport {
        self.mapek.run_cycle().await
    }

    /// Writes the registry file if persistence is configured.
    pub fn persist(&self) -> KResult<()> {
        if let Some(p) = &self.cfg.registry_path {
            self.registry.save(p).map_err(|e| KernelError::Io(format!("registry file: {e}")))?;
        }
        Ok(())
    }

    /// Drains every module, stops subprocesses (force-killing after the
    /// grace period), flushes history and closes the listeners. Safe to
    /// call more than once.
    pub async fn shutdown(&self) -> ShutdownReport {
        if self.shut.swap(true, Ordering::SeqCst) {
            return ShutdownReport {
                already_shut_down: true,
                ..Default::default()
            };
        }
        let mut report = ShutdownReport::default();
        if let Err(e) = self.persist() {
            report.failures.push(e.to_string());
        }
        self.scheduler.stop();
        for (id, outcome) in self.services.shutdown_all().await {
            report.stopped.push(format!("{id}: {outcome:?}"));
        }
        self.monitor
            .log(self.clock.now_ms(), Level::Info, "kernel", "shutdown complete", None);
        self.monitor.flush();
        self.stop.notify_waiters();
        let tasks: Vec<_> = self.tasks.lock().drain(..).collect();
        for t in tasks {
            t.abort();
        }
        report
    }
}
