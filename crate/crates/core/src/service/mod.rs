//! Module lifecycle: start/stop, deployments and rollback, scaling, health
//! probing, demand loading and eviction, and orchestrator-style recovery.

mod instance;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

pub use instance::{ActiveGuard, Endpoint, ForwardError, LiveInstance};

use crate::clock::{EpochMs, SharedClock};
use crate::dispatcher::select_instance;
use crate::error::{KResult, KernelError};
use crate::fault::{Fault, FaultCommand};
use crate::handler::{HandlerRegistry, HandlerRequest, InstanceContext};
use crate::isc::{Bus, Envelope, Transport, TransportError};
use crate::monitor::{Level, Metric, MetricSample, Monitor, ProbeOutcome, ProbeReport};
use crate::registry::{
    Deployment, DeploymentStatus, InstanceState, ModuleDescriptor, ModuleRuntime, Paradigm, Registry, ServiceInstance,
    Version,
};
use crate::subprocess::{ChildConn, SpawnSpec, StopOutcome};

/// Prefix reserved for resident kernel servers.
pub const KERNEL_PREFIX: &str = "kernel.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    Mapek,
    Baseline,
    Off,
}

impl RecoveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RecoveryMode::Mapek => "mapek",
            RecoveryMode::Baseline => "baseline",
            RecoveryMode::Off => "off",
        }
    }

    fn from_u8(v: u8) -> Self {
        match v {
            0 => RecoveryMode::Mapek,
            1 => RecoveryMode::Baseline,
            _ => RecoveryMode::Off,
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            RecoveryMode::Mapek => 0,
            RecoveryMode::Baseline => 1,
            RecoveryMode::Off => 2,
        }
    }
}

impl FromStr for RecoveryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mapek" => Ok(RecoveryMode::Mapek),
            "baseline" => Ok(RecoveryMode::Baseline),
            "off" => Ok(RecoveryMode::Off),
            other => Err(format!("unknown mode {other:?} (mapek, baseline, off)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub probe_timeout: Duration,
    pub failure_threshold: u32,
    pub hello_timeout: Duration,
    pub stop_grace: Duration,
    pub drain_timeout: Duration,
    pub start_timeout: Duration,
    pub control_timeout: Duration,
    pub max_replicas: u32,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            probe_timeout: Duration::from_secs(2),
            failure_threshold: 3,
            hello_timeout: Duration::from_secs(3),
            stop_grace: Duration::from_secs(5),
            drain_timeout: Duration::from_secs(10),
            start_timeout: Duration::from_secs(10),
            control_timeout: Duration::from_secs(2),
            max_replicas: 16,
        }
    }
}

/// Result of one probe sweep.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ProbeSweep {
    pub reports: Vec<ProbeReport>,
    pub replaced: Vec<(String, String)>,
    pub evicted: Vec<String>,
}

pub struct ServiceManager {
    registry: Arc<Registry>,
    monitor: Arc<Monitor>,
    handlers: HandlerRegistry,
    clock: SharedClock,
    bus: Bus,
    cfg: SupervisorConfig,
    mode: AtomicU8,
}

impl std::fmt::Debug for ServiceManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceManager").field("mode", &self.mode()).finish()
    }
}

impl ServiceManager {
    pub fn new(
        registry: Arc<Registry>,
        monitor: Arc<Monitor>,
        handlers: HandlerRegistry,
        clock: SharedClock,
        bus: Bus,
        cfg: SupervisorConfig,
        mode: RecoveryMode,
    ) -> Arc<Self> {
        Arc::new(Self {
            registry,
            monitor,
            handlers,
            clock,
            bus,
            cfg,
            mode: AtomicU8::new(mode.to_u8()),
        })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn monitor(&self) -> &Arc<Monitor> {
        &self.monitor
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.cfg
    }

    pub fn mode(&self) -> RecoveryMode {
        RecoveryMode::from_u8(self.mode.load(Ordering::SeqCst))
    }

    pub fn set_mode(&self, mode: RecoveryMode) {
        self.mode.store(mode.to_u8(), Ordering::SeqCst);
        self.log(Level::Info, "service-manager", format!("recovery mode set to {}", mode.as_str()));
    }

    fn now(&self) -> EpochMs {
        self.clock.now_ms()
    }

    fn log(&self, level: Level, source: &str, msg: impl Into<String>) {
        self.monitor.log(self.now(), level, source, msg, None);
    }

    // ---- registration ----------------------------------------------------

    pub async fn register_module(self: &Arc<Self>, desc: ModuleDescriptor) -> KResult<()> {
        if desc.module_id.starts_with(KERNEL_PREFIX) {
            return Err(KernelError::InvalidDescriptor(format!(
                "module_id: prefix {KERNEL_PREFIX:?} is reserved for kernel servers"
            )));
        }
        self.insert_module(desc, false).await
    }

    /// Registers a resident kernel server: InProcess, never demand-loaded.
    pub async fn register_kernel_server(self: &Arc<Self>, desc: ModuleDescriptor) -> KResult<()> {
        self.insert_module(desc, true).await
    }

    /// Re-registers a module saved by a previous kernel run.
    pub async fn restore_module(self: &Arc<Self>, m: crate::registry::PersistedModule) -> KResult<()> {
        let desc = m.descriptor.clone();
        self.registry.restore(m)?;
        self.after_insert(desc).await
    }

    async fn insert_module(self: &Arc<Self>, desc: ModuleDescriptor, kernel_server: bool) -> KResult<()> {
        if desc.paradigm == Paradigm::InProcess && !self.handlers.contains(&desc.artifact_ref) {
            return Err(KernelError::InvalidDescriptor(format!(
                "artifact_ref: no InProcess handler named {:?}",
                desc.artifact_ref
            )));
        }
        self.registry.insert(desc.clone(), kernel_server, self.now())?;
        self.after_insert(desc).await
    }

    async fn after_insert(self: &Arc<Self>, desc: ModuleDescriptor) -> KResult<()> {
        let id = desc.module_id.clone();
        self.bus.register_endpoint(
            &id,
            Arc::new(ModuleTransport {
                services: Arc::downgrade(self),
                module_id: id.clone(),
            }),
        );
        self.log(Level::Info, "service-manager", format!("registered {id} {}", desc.version));
        if !desc.demand_loaded {
            let mut started = Vec::new();
            for _ in 0..desc.replicas_desired {
                match self.start_instance(&id, &desc.version, &desc.artifact_ref, 0).await {
                    Ok(i) => started.push(i),
                    Err(e) => {
                        for i in started {
                            self.drain_and_stop(&i).await;
                        }
                        let _ = self.registry.remove(&id);
                        self.bus.unregister_endpoint(&id);
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    }

    pub async fn unregister_module(&self, module_id: &str) -> KResult<()> {
        if self.registry.is_kernel_server(module_id) {
            return Err(KernelError::KernelServer(module_id.to_string()));
        }
        let rt = self.registry.runtime(module_id)?;
        let _lane = rt.lane.lock().await;
        self.registry.withdraw_routes(module_id)?;
        self.bus.unregister_endpoint(module_id);
        let instances = self.registry.instances(module_id)?;
        self.stop_all(instances).await;
        self.registry.remove(module_id)?;
        self.log(Level::Info, "service-manager", format!("unregistered {module_id}"));
        Ok(())
    }

    pub fn lookup(&self, module_id: &str) -> KResult<(ModuleDescriptor, Vec<ServiceInstance>)> {
        self.registry.lookup(module_id)
    }

    // ---- instances -------------------------------------------------------

    /// Starts one instance and waits until it is Ready or has failed.
    pub async fn start_instance(
        &self,
        module_id: &str,
        version: &str,
        artifact_ref: &str,
        restart_count: u32,
    ) -> KResult<Arc<LiveInstance>> {
        let (paradigm, rt) = self.registry.read(module_id, |e| (e.desc.paradigm, e.rt.clone()))?;
        let seq = rt.instance_seq.fetch_add(1, Ordering::SeqCst) + 1;
        let instance_id = format!("{module_id}-{seq}");
        let inst = Arc::new(LiveInstance::new(
            instance_id.clone(),
            module_id.to_string(),
            version.to_string(),
            artifact_ref.to_string(),
            self.now(),
            restart_count,
        ));
        self.registry.add_instance(inst.clone())?;
        rt.starts.fetch_add(1, Ordering::SeqCst);
        let fault = rt.fault.lock().clone();

        let endpoint = match paradigm {
            Paradigm::InProcess => {
                let ctx = InstanceContext {
                    module_id: module_id.to_string(),
                    instance_id: instance_id.clone(),
                    version: version.to_string(),
                    artifact_ref: artifact_ref.to_string(),
                };
                self.handlers.instantiate(artifact_ref, &ctx).map(|h| {
                    if let Some(cmd) = &fault {
                        if h.supports_control() {
                            let _ = h.control(cmd);
                        }
                    }
                    Endpoint::InProcess {
                        handler: h,
                        name: artifact_ref.to_string(),
                    }
                })
            }
            Paradigm::Subprocess => {
                let mut env = vec![
                    ("MUK_MODULE".to_string(), module_id.to_string()),
                    ("MUK_INSTANCE".to_string(), instance_id.clone()),
                    ("MUK_VERSION".to_string(), version.to_string()),
                ];
                if let Some(cmd) = &fault {
                    env.push(("MUK_FAULT".to_string(), serde_json::to_string(cmd).expect("fault json")));
                }
                let mon = self.monitor.clone();
                let clock = self.clock.clone();
                let source = instance_id.clone();
                ChildConn::spawn(SpawnSpec {
                    command: artifact_ref,
                    env,
                    hello_timeout: self.cfg.hello_timeout,
                    name: instance_id.clone(),
                    stderr: Some(Arc::new(move |line: &str| {
                        mon.log(clock.now_ms(), Level::Info, &source, line.to_string(), None)
                    })),
                })
                .await
                .map(Endpoint::Subprocess)
            }
        };

        match endpoint {
            Ok(ep) => {
                inst.attach(ep);
                let _ = inst.transition(InstanceState::Ready);
                self.log(Level::Info, &instance_id, format!("started {module_id} {version}"));
                Ok(inst)
            }
            Err(cause) => {
                let _ = inst.transition(InstanceState::Stopped);
                self.registry.remove_instance(module_id, &instance_id);
                self.log(Level::Error, &instance_id, format!("start failed: {cause}"));
                Err(KernelError::StartFailure(cause))
            }
        }
    }

    /// Stops routing to `inst`, waits for in-flight requests (bounded by the
    /// drain timeout), then terminates it and drops it from the registry.
    pub async fn drain_and_stop(&self, inst: &Arc<LiveInstance>) -> StopOutcome {
        self.clone_handle().drain_and_stop(inst).await
    }

    async fn stop_all(&self, instances: Vec<Arc<LiveInstance>>) -> Vec<(String, StopOutcome)> {
        let mut set = JoinSet::new();
        for inst in instances {
            let me = self.clone_handle();
            set.spawn(async move {
                let outcome = me.drain_and_stop(&inst).await;
                (inst.instance_id.clone(), outcome)
            });
        }
        let mut out = Vec::new();
        while let Some(r) = set.join_next().await {
            if let Ok(v) = r {
                out.push(v);
            }
        }
        out
    }

    fn clone_handle(&self) -> StopHandle {
        StopHandle {
            registry: self.registry.clone(),
            monitor: self.monitor.clone(),
            clock: self.clock.clone(),
            cfg: self.cfg.clone(),
        }
    }

    /// Stops every instance of every module. Returns (instance, outcome).
    pub async fn shutdown_all(&self) -> Vec<(String, StopOutcome)> {
        let mut instances = Vec::new();
        for id in self.registry.module_ids() {
            let _ = self.registry.withdraw_routes(&id);
            self.bus.unregister_endpoint(&id);
            instances.extend(self.registry.instances(&id).unwrap_or_default());
        }
        self.stop_all(instances).await
    }

    // ---- deployments -----------------------------------------------------

    pub async fn deploy(&self, module_id: &str, version: &str, artifact_ref: &str) -> KResult<Deployment> {
        if self.registry.is_kernel_server(module_id) {
            return Err(KernelError::KernelServer(module_id.to_string()));
        }
        let requested = Version::from_str(version).map_err(|e| KernelError::InvalidDescriptor(format!("version: {e}")))?;
        let rt = self.registry.runtime(module_id)?;
        let _lane = rt.lane.lock().await;
        let active = self.registry.read(module_id, |e| e.desc.version.clone())?;
        if requested <= Version::from_str(&active).expect("registered version parses") {
            return Err(KernelError::VersionNotNewer {
                active,
                requested: version.to_string(),
            });
        }
        let old = self.live_instances(module_id)?;
        self.start_replacements(module_id, version, artifact_ref).await?;
        let dep = Deployment {
            module_id: module_id.to_string(),
            version: version.to_string(),
            artifact_ref: artifact_ref.to_string(),
            deployed_at: self.now(),
            status: DeploymentStatus::Active,
        };
        self.registry.update(module_id, |e| {
            for d in e.deployments.iter_mut().filter(|d| d.status == DeploymentStatus::Active) {
                d.status = DeploymentStatus::Superseded;
            }
            e.deployments.push(dep.clone());
            e.desc.version = version.to_string();
            e.desc.artifact_ref = artifact_ref.to_string();
        })?;
        self.log(Level::Info, "service-manager", format!("deployed {module_id} {version}"));
        self.stop_all(old).await;
        Ok(dep)
    }

    /// Target of a rollback: the newest Superseded deployment whose version
    /// differs from the active one.
    pub fn rollback_target(&self, module_id: &str) -> KResult<Option<Deployment>> {
        self.registry.read(module_id, |e| {
            let active = e.desc.version.clone();
            e.deployments
                .iter()
                .rev()
                .find(|d| d.status == DeploymentStatus::Superseded && d.version != active)
                .cloned()
        })
    }

    pub async fn rollback(&self, module_id: &str) -> KResult<Deployment> {
        if self.registry.is_kernel_server(module_id) {
            return Err(KernelError::KernelServer(module_id.to_string()));
        }
        let rt = self.registry.runtime(module_id)?;
        let _lane = rt.lane.lock().await;
        let target = self
            .rollback_target(module_id)?
            .ok_or_else(|| KernelError::NothingToRollBackTo(module_id.to_string()))?;
        let old = self.live_instances(module_id)?;
        self.start_replacements(module_id, &target.version, &target.artifact_ref).await?;
        let dep = Deployment {
            deployed_at: self.now(),
            status: DeploymentStatus::Active,
            ..target
        };
        self.registry.update(module_id, |e| {
            for d in e.deployments.iter_mut().filter(|d| d.status == DeploymentStatus::Active) {
                d.status = DeploymentStatus::RolledBack;
            }
            e.deployments.push(dep.clone());
            e.desc.version = dep.version.clone();
            e.desc.artifact_ref = dep.artifact_ref.clone();
        })?;
        self.log(Level::Info, "service-manager", format!("rolled back {module_id} to {}", dep.version));
        self.stop_all(old).await;
        Ok(dep)
    }

    /// Starts `replicas_desired` instances of a version; on any failure the
    /// ones already started are stopped again.
    async fn start_replacements(&self, module_id: &str, version: &str, artifact_ref: &str) -> KResult<()> {
        let n = self.registry.read(module_id, |e| e.desc.replicas_desired)?;
        let mut started = Vec::new();
        for _ in 0..n {
            match self.start_instance(module_id, version, artifact_ref, 0).await {
                Ok(i) => started.push(i),
                Err(e) => {
                    self.stop_all(started).await;
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    pub fn live_instances(&self, module_id: &str) -> KResult<Vec<Arc<LiveInstance>>> {
        Ok(self
            .registry
            .instances(module_id)?
            .into_iter()
            .filter(|i| i.state().is_live())
            .collect())
    }

    // ---- scaling ---------------------------------------------------------

    pub async fn scale(&self, module_id: &str, replicas: u32) -> KResult<()> {
        if replicas == 0 {
            return Err(KernelError::InvalidReplicas);
        }
        if replicas > self.cfg.max_replicas {
            return Err(KernelError::AboveMax {
                requested: replicas,
                max: self.cfg.max_replicas,
            });
        }
        if self.registry.is_kernel_server(module_id) {
            return Err(KernelError::KernelServer(module_id.to_string()));
        }
        let rt = self.registry.runtime(module_id)?;
        let _lane = rt.lane.lock().await;
        let (version, artifact) = self.registry.update(module_id, |e| {
            e.desc.replicas_desired = replicas;
            (e.desc.version.clone(), e.desc.artifact_ref.clone())
        })?;
        let live = self.live_instances(module_id)?;
        let n = replicas as usize;
        if live.len() < n {
            for _ in live.len()..n {
                self.start_instance(module_id, &version, &artifact, 0).await?;
            }
        } else if live.len() > n {
            // Unhealthy first, then the newest.
            let mut victims = live;
            victims.sort_by_key(|i| (i.state() != InstanceState::Unhealthy, std::cmp::Reverse(i.started_at)));
            victims.truncate(victims.len() - n);
            self.stop_all(victims).await;
        }
        self.log(Level::Info, "service-manager", format!("scaled {module_id} to {replicas}"));
        Ok(())
    }

    // ---- probing and recovery --------------------------------------------

    pub async fn probe_once(&self, inst: &Arc<LiveInstance>) -> ProbeReport {
        let quota = self
            .registry
            .read(&inst.module_id, |e| e.desc.quota.max_memory_bytes)
            .unwrap_or(u64::MAX);
        let result = inst.probe(self.cfg.probe_timeout).await;
        let at = self.now();
        let (outcome, memory) = match result {
            Ok(m) if m > quota => (ProbeOutcome::Fail(format!("memory {m} above quota {quota}")), m),
            Ok(m) => (ProbeOutcome::Ok, m),
            Err(e) => (ProbeOutcome::Fail(e), 0),
        };
        let ok = outcome == ProbeOutcome::Ok;
        let failures = inst.note_probe(ok);
        if ok {
            if inst.state() == InstanceState::Degraded {
                let _ = inst.transition(InstanceState::Ready);
            }
        } else if failures >= self.cfg.failure_threshold {
            if inst.transition(InstanceState::Unhealthy).is_ok() {
                self.monitor.log(
                    at,
                    Level::Warn,
                    &inst.instance_id,
                    format!("unhealthy after {failures} failed probes"),
                    None,
                );
            }
        } else if inst.state() == InstanceState::Ready {
            let _ = inst.transition(InstanceState::Degraded);
        }
        if memory > 0 {
            self.monitor.record_sample(MetricSample {
                at,
                module_id: inst.module_id.clone(),
                instance_id: inst.instance_id.clone(),
                metric: Metric::MemoryBytes,
                value: memory as f64,
            });
        }
        let report = ProbeReport {
            instance_id: inst.instance_id.clone(),
            module_id: inst.module_id.clone(),
            at,
            outcome,
            memory_bytes_selfreport: memory,
            consecutive_failures: failures,
        };
        self.monitor.record_probe(report.clone());
        report
    }

    /// Probes every running instance, replaces Unhealthy ones (unless the
    /// recovery mode is off) and evicts idle demand-loaded modules.
    pub async fn probe_all(self: &Arc<Self>) -> ProbeSweep {
        let targets: Vec<_> = self
            .registry
            .all_instances()
            .into_iter()
            .filter(|i| matches!(i.state(), InstanceState::Ready | InstanceState::Degraded | InstanceState::Unhealthy))
            .collect();
        let mut set = JoinSet::new();
        for inst in targets {
            let me = self.clone();
            set.spawn(async move { me.probe_once(&inst).await });
        }
        let mut sweep = ProbeSweep::default();
        while let Some(r) = set.join_next().await {
            if let Ok(rep) = r {
                sweep.reports.push(rep);
            }
        }
        sweep.reports.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        if self.mode() != RecoveryMode::Off {
            for inst in self.registry.all_instances() {
                if inst.state() == InstanceState::Unhealthy && !self.registry.is_kernel_server(&inst.module_id) {
                    if let Ok(new_id) = self.replace_instance(&inst, "unhealthy").await {
                        sweep.replaced.push((inst.instance_id.clone(), new_id));
                    }
                }
            }
        }
        sweep.evicted = self.evict_idle(self.now()).await;
        sweep
    }

    /// Starts a replacement for `inst`, then stops `inst`. Tallies a restart.
    pub async fn replace_instance(&self, inst: &Arc<LiveInstance>, reason: &str) -> KResult<String> {
        let rt = self.registry.runtime(&inst.module_id)?;
        let _lane = rt.lane.lock().await;
        if !self
            .registry
            .instances(&inst.module_id)?
            .iter()
            .any(|i| i.instance_id == inst.instance_id)
        {
            return Err(KernelError::UnknownInstance(inst.instance_id.clone()));
        }
        let (version, artifact) = self
            .registry
            .read(&inst.module_id, |e| (e.desc.version.clone(), e.desc.artifact_ref.clone()))?;
        let new = self
            .start_instance(&inst.module_id, &version, &artifact, inst.restart_count + 1)
            .await?;
        rt.restarts.lock().push(self.now());
        self.log(
            Level::Warn,
            &inst.instance_id,
            format!("replaced by {} ({reason})", new.instance_id),
        );
        self.drain_and_stop(inst).await;
        Ok(new.instance_id.clone())
    }

    /// Restart through replacement, whatever the current state.
    pub async fn restart_instance(&self, instance_id: &str) -> KResult<String> {
        let inst = self.registry.find_instance(instance_id)?;
        if self.registry.is_kernel_server(&inst.module_id) {
            return Err(KernelError::KernelServer(inst.module_id.clone()));
        }
        self.replace_instance(&inst, "restart").await
    }

    /// Orchestrator-style recovery: replace an Unhealthy instance, with no
    /// diagnosis. Only valid while MAPE-K is not in charge.
    pub async fn baseline_recover(&self, instance_id: &str) -> KResult<String> {
        if self.mode() == RecoveryMode::Mapek {
            return Err(KernelError::Precondition("MAPE-K mode is active".into()));
        }
        let inst = self.registry.find_instance(instance_id)?;
        if inst.state() != InstanceState::Unhealthy {
            return Err(KernelError::Precondition(format!(
                "{instance_id} is {}, not Unhealthy",
                inst.state().as_str()
            )));
        }
        self.replace_instance(&inst, "baseline recovery").await
    }

    pub fn restart_tally(&self, module_id: &str) -> KResult<usize> {
        Ok(self.registry.runtime(module_id)?.restart_total())
    }

    // ---- demand loading --------------------------------------------------

    /// Returns a serving instance, starting one if there is none. Concurrent
    /// callers share a single start.
    pub async fn ensure_loaded(&self, module_id: &str) -> KResult<Arc<LiveInstance>> {
        let rt = self.registry.runtime(module_id)?;
        if let Some(i) = self.first_serving(module_id)? {
            return Ok(i);
        }
        let _latch = rt.load_latch.lock().await;
        if let Some(i) = self.first_serving(module_id)? {
            return Ok(i);
        }
        let (version, artifact) = self
            .registry
            .read(module_id, |e| (e.desc.version.clone(), e.desc.artifact_ref.clone()))?;
        rt.last_dispatch.store(self.now(), Ordering::SeqCst);
        match tokio::time::timeout(
            self.cfg.start_timeout,
            self.start_instance(module_id, &version, &artifact, 0),
        )
        .await
        {
            Ok(Ok(i)) => Ok(i),
            Ok(Err(KernelError::StartFailure(cause))) => Err(KernelError::StartTimeout(cause)),
            Ok(Err(e)) => Err(e),
            Err(_) => Err(KernelError::StartTimeout(format!(
                "no Ready instance within {} ms",
                self.cfg.start_timeout.as_millis()
            ))),
        }
    }

    fn first_serving(&self, module_id: &str) -> KResult<Option<Arc<LiveInstance>>> {
        Ok(self
            .registry
            .instances(module_id)?
            .into_iter()
            .find(|i| i.state().is_serving()))
    }

    /// Drains demand-loaded modules idle for at least their TTL. Kernel
    /// servers and ordinary modules are never touched.
    pub async fn evict_idle(&self, now: EpochMs) -> Vec<String> {
        let mut candidates: Vec<(Arc<ModuleRuntime>, Vec<Arc<LiveInstance>>)> = Vec::new();
        self.registry.for_each(|e| {
            if e.kernel_server || !e.desc.demand_loaded || e.instances.is_empty() {
                return;
            }
            let ttl_ms = e.desc.idle_ttl_s.unwrap_or(u64::MAX / 1000) * 1000;
            let last = e.rt.last_dispatch.load(Ordering::SeqCst);
            if now.saturating_sub(last) >= ttl_ms && e.rt.inflight.load(Ordering::SeqCst) == 0 {
                candidates.push((e.rt.clone(), e.instances.clone()));
            }
        });
        let mut evicted = Vec::new();
        for (rt, instances) in candidates {
            let _latch = rt.load_latch.lock().await;
            for inst in instances {
                if inst.active_requests() == 0 && inst.state().is_live() {
                    self.drain_and_stop(&inst).await;
                    evicted.push(inst.instance_id.clone());
                }
            }
        }
        for id in &evicted {
            self.log(Level::Info, id, "evicted after idle TTL");
        }
        evicted
    }

    // ---- healing and fault control ---------------------------------------

    pub async fn heal(&self, instance_id: &str, hook: &str) -> KResult<()> {
        let inst = self.registry.find_instance(instance_id)?;
        if !inst.heal_hooks().iter().any(|h| h == hook) {
            return Err(KernelError::Precondition(format!("{instance_id} declares no heal hook {hook:?}")));
        }
        let r = inst.heal(hook, self.cfg.control_timeout).await;
        let (level, msg) = match &r {
            Ok(()) => (Level::Info, format!("heal hook {hook} ok")),
            Err(e) => (Level::Warn, format!("heal hook {hook} failed: {e}")),
        };
        self.log(level, instance_id, msg);
        r.map_err(KernelError::ActionFailed)
    }

    /// Switches every instance of the module into a fault mode. The fault
    /// sticks to the module: instances started later get it too.
    pub async fn inject_fault(&self, module_id: &str, cmd: FaultCommand) -> KResult<()> {
        let live = self.live_instances(module_id)?;
        if live.is_empty() || !live.iter().all(|i| i.supports_control()) {
            return Err(KernelError::UnsupportedFault(module_id.to_string()));
        }
        let rt = self.registry.runtime(module_id)?;
        *rt.fault.lock() = match cmd.fault {
            Fault::Clear => None,
            _ => Some(cmd.clone()),
        };
        let mut errors = Vec::new();
        for inst in &live {
            if let Err(e) = inst.control(&cmd, self.cfg.control_timeout).await {
                errors.push(format!("{}: {e}", inst.instance_id));
            }
        }
        self.log(Level::Warn, "service-manager", format!("fault {:?} injected into {module_id}", cmd.fault));
        if errors.is_empty() {
            Ok(())
        } else {
            Err(KernelError::ActionFailed(errors.join("; ")))
        }
    }

    /// Instance states grouped by module, for snapshots.
    pub fn module_states(&self) -> Vec<crate::monitor::ModuleStates> {
        let mut out = Vec::new();
        self.registry.for_each(|e| {
            out.push(crate::monitor::ModuleStates {
                module_id: e.desc.module_id.clone(),
                kernel_server: e.kernel_server,
                version: e.desc.version.clone(),
                instance_states: e.instances.iter().map(|i| i.state().as_str().to_string()).collect(),
            })
        });
        out
    }

    pub fn instances_by_module(&self) -> BTreeMap<String, Vec<ServiceInstance>> {
        let mut out = BTreeMap::new();
        self.registry.for_each(|e| {
            out.insert(
                e.desc.module_id.clone(),
                e.instances.iter().map(|i| i.snapshot()).collect(),
            );
        });
        out
    }
}

/// The parts of the manager needed to stop instances from spawned tasks.
#[derive(Clone)]
struct StopHandle {
    registry: Arc<Registry>,
    monitor: Arc<Monitor>,
    clock: SharedClock,
    cfg: SupervisorConfig,
}

impl StopHandle {
    async fn drain_and_stop(&self, inst: &Arc<LiveInstance>) -> StopOutcome {
        if inst.state() == InstanceState::Stopped {
            return StopOutcome::AlreadyGone;
        }
        let _ = inst.transition(InstanceState::Stopping);
        let deadline = tokio::time::Instant::now() + self.cfg.drain_timeout;
        while inst.active_requests() > 0 && tokio::time::Instant::now() < deadline {
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        let outcome = inst.stop(self.cfg.stop_grace).await;
        let _ = inst.transition(InstanceState::Stopped);
        self.registry.remove_instance(&inst.module_id, &inst.instance_id);
        let level = if outcome == StopOutcome::Killed { Level::Warn } else { Level::Info };
        self.monitor
            .log(self.clock.now_ms(), level, &inst.instance_id, format!("stopped ({outcome:?})"), None);
        outcome
    }
}

/// Bus endpoint for a module: ISC requests become `POST /` handler calls on
/// a round-robin instance.
struct ModuleTransport {
    services: std::sync::Weak<ServiceManager>,
    module_id: String,
}

#[async_trait]
impl Transport for ModuleTransport {
    async fn send(&self, env: Envelope) -> Result<Envelope, TransportError> {
        let sm = self
            .services
            .upgrade()
            .ok_or_else(|| TransportError::Unavailable("kernel stopped".into()))?;
        let demand = sm
            .registry
            .read(&self.module_id, |e| e.desc.demand_loaded)
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        if demand {
            sm.ensure_loaded(&self.module_id)
                .await
                .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        }
        let rt = sm
            .registry
            .runtime(&self.module_id)
            .map_err(|e| TransportError::Unavailable(e.to_string()))?;
        let instances = sm.registry.instances(&self.module_id).unwrap_or_default();
        let states: Vec<(InstanceState, u64)> = instances.iter().map(|i| (i.state(), i.active_requests())).collect();
        let idx = select_instance(&states, crate::registry::Strategy::RoundRobin, &rt.rr)
            .ok_or_else(|| TransportError::Unavailable(format!("{} has no ready instance", self.module_id)))?;
        let inst = instances[idx].clone();
        let _guard = inst.begin_request();
        rt.last_dispatch.store(sm.now(), Ordering::SeqCst);
        let mut req = HandlerRequest::new("POST", "/", env.body.clone());
        req.request_id = env.id.clone();
        req.headers.insert("content-type".into(), env.content_type.clone());
        req.headers.insert("x-muk-source".into(), env.source.clone());
        let timeout = Duration::from_millis(env.ttl_ms.max(1));
        match inst.forward(req, timeout).await {
            Ok(resp) if resp.status < 500 => Ok(env.reply(resp.body)),
            Ok(resp) => Err(TransportError::Remote(format!(
                "status {}: {}",
                resp.status,
                String::from_utf8_lossy(&resp.body)
            ))),
            Err(ForwardError::Timeout) => Err(TransportError::Timeout),
            Err(ForwardError::Transport(e)) => Err(TransportError::Unavailable(e)),
        }
    }
}
