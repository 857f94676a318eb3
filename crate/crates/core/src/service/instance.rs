use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::clock::EpochMs;
use crate::fault::{FaultCommand, CONTROL_DESTINATION};
use crate::handler::{Handler, HandlerRequest, HandlerResponse};
use crate::isc::{Envelope, Kind, TransportError};
use crate::registry::{EndpointInfo, InstanceState, ServiceInstance};
use crate::subprocess::{ChildConn, HealBody, ProbeOkBody, StopOutcome};

pub enum Endpoint {
    InProcess { handler: Arc<dyn Handler>, name: String },
    Subprocess(Arc<ChildConn>),
}

enum Handle {
    InProcess(Arc<dyn Handler>),
    Subprocess(Arc<ChildConn>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardError {
    Timeout,
    Transport(String),
}

/// A running execution environment. Shared between the registry, the
/// dispatcher and the supervisor; [`LiveInstance::snapshot`] is the only
/// view handed out of the kernel.
pub struct LiveInstance {
    pub instance_id: String,
    pub module_id: String,
    pub version: String,
    pub artifact_ref: String,
    pub started_at: EpochMs,
    pub restart_count: u32,
    state: Mutex<InstanceState>,
    active: AtomicU64,
    consecutive_failures: AtomicU32,
    endpoint: Mutex<Option<Endpoint>>,
    heal_hooks: Mutex<Vec<String>>,
    control: Mutex<bool>,
}

impl std::fmt::Debug for LiveInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveInstance")
            .field("instance_id", &self.instance_id)
            .field("state", &self.state())
            .finish()
    }
}

/// Decrements the active-request counter when dropped.
pub struct ActiveGuard(Arc<LiveInstance>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

impl LiveInstance {
    pub fn new(
        instance_id: String,
        module_id: String,
        version: String,
        artifact_ref: String,
        started_at: EpochMs,
        restart_count: u32,
    ) -> Self {
        Self {
            instance_id,
            module_id,
            version,
            artifact_ref,
            started_at,
            restart_count,
            state: Mutex::new(InstanceState::Starting),
            active: AtomicU64::new(0),
            consecutive_failures: AtomicU32::new(0),
            endpoint: Mutex::new(None),
            heal_hooks: Mutex::new(Vec::new()),
            control: Mutex::new(false),
        }
    }

    pub fn attach(&self, endpoint: Endpoint) {
        let (hooks, control) = match &endpoint {
            Endpoint::InProcess { handler, .. } => (handler.heal_hooks(), handler.supports_control()),
            Endpoint::Subprocess(conn) => (conn.hello().heals.clone(), conn.hello().control),
        };
        *self.heal_hooks.lock() = hooks;
        *self.control.lock() = control;
        *self.endpoint.lock() = Some(endpoint);
    }

    pub fn state(&self) -> InstanceState {
        *self.state.lock()
    }

    /// Moves along a declared lifecycle edge; anything else is refused and
    /// leaves the state untouched.
    pub fn transition(&self, to: InstanceState) -> Result<InstanceState, InstanceState> {
        let mut st = self.state.lock();
        if st.can_transition(to) {
            let from = *st;
            *st = to;
            Ok(from)
        } else {
            Err(*st)
        }
    }

    pub fn active_requests(&self) -> u64 {
        self.active.load(Ordering::SeqCst)
    }

    pub fn begin_request(self: &Arc<Self>) -> ActiveGuard {
        self.active.fetch_add(1, Ordering::SeqCst);
        ActiveGuard(self.clone())
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures.load(Ordering::SeqCst)
    }

    pub fn note_probe(&self, ok: bool) -> u32 {
        if ok {
            self.consecutive_failures.store(0, Ordering::SeqCst);
            0
        } else {
            self.consecutive_failures.fetch_add(1, Ordering::SeqCst) + 1
        }
    }

    pub fn heal_hooks(&self) -> Vec<String> {
        self.heal_hooks.lock().clone()
    }

    pub fn supports_control(&self) -> bool {
        *self.control.lock()
    }

    pub fn pid(&self) -> Option<u32> {
        match &*self.endpoint.lock() {
            Some(Endpoint::Subprocess(c)) => c.pid(),
            _ => None,
        }
    }

    pub fn snapshot(&self) -> ServiceInstance {
        let endpoint = match &*self.endpoint.lock() {
            Some(Endpoint::InProcess { name, .. }) => EndpointInfo::InProcess { handler: name.clone() },
            Some(Endpoint::Subprocess(c)) => EndpointInfo::Subprocess {
                pid: c.pid(),
                command: c.command().to_string(),
            },
            None => EndpointInfo::InProcess {
                handler: self.artifact_ref.clone(),
            },
        };
        ServiceInstance {
            instance_id: self.instance_id.clone(),
            module_id: self.module_id.clone(),
            version: self.version.clone(),
            state: self.state(),
            endpoint,
            started_at: self.started_at,
            active_requests: self.active_requests(),
            restart_count: self.restart_count,
        }
    }

    fn handle(&self) -> Option<Handle> {
        match &*self.endpoint.lock() {
            Some(Endpoint::InProcess { handler, .. }) => Some(Handle::InProcess(handler.clone())),
            Some(Endpoint::Subprocess(c)) => Some(Handle::Subprocess(c.clone())),
            None => None,
        }
    }

    pub async fn forward(&self, req: HandlerRequest, timeout: Duration) -> Result<HandlerResponse, ForwardError> {
        match self.handle() {
            Some(Handle::InProcess(h)) => tokio::time::timeout(timeout, h.handle(req))
                .await
                .map_err(|_| ForwardError::Timeout),
            Some(Handle::Subprocess(c)) => {
                let body = serde_json::to_vec(&req).map_err(|e| ForwardError::Transport(e.to_string()))?;
                let env = Envelope::request("kernel", &self.module_id, body);
                let reply = c.call(env, timeout).await.map_err(|e| match e {
                    TransportError::Timeout => ForwardError::Timeout,
                    other => ForwardError::Transport(other.to_string()),
                })?;
                reply
                    .body_json::<HandlerResponse>()
                    .map_err(|e| ForwardError::Transport(format!("bad reply body: {e}")))
            }
            None => Err(ForwardError::Transport("instance has no endpoint".into())),
        }
    }

    /// Health probe; `Ok` carries the memory self-report.
    pub async fn probe(&self, timeout: Duration) -> Result<u64, String> {
        match self.handle() {
            Some(Handle::InProcess(h)) => h.health(),
            Some(Handle::Subprocess(c)) => {
                let env = Envelope::new(Kind::Probe, "kernel", &self.instance_id, Vec::new());
                let reply = c.call(env, timeout).await.map_err(|e| e.to_string())?;
                if reply.kind != Kind::ProbeOk {
                    return Err(format!("unexpected {} to Probe", reply.kind));
                }
                reply
                    .body_json::<ProbeOkBody>()
                    .map(|b| b.memory_bytes)
                    .map_err(|e| format!("bad ProbeOk body: {e}"))
            }
            None => Err("instance has no endpoint".into()),
        }
    }

    pub async fn heal(&self, hook: &str, timeout: Duration) -> Result<(), String> {
        match self.handle() {
            Some(Handle::InProcess(h)) => h.heal(hook),
            Some(Handle::Subprocess(c)) => {
                let body = serde_json::to_vec(&HealBody { hook: hook.to_string() }).expect("heal body");
                let env = Envelope::new(Kind::Heal, "kernel", &self.instance_id, body);
                let reply = c.call(env, timeout).await.map_err(|e| e.to_string())?;
                match reply.kind {
                    Kind::HealOk => Ok(()),
                    Kind::HealFail => Err(String::from_utf8_lossy(&reply.body).into_owned()),
                    other => Err(format!("unexpected {other} to Heal")),
                }
            }
            None => Err("instance has no endpoint".into()),
        }
    }

    pub async fn control(&self, cmd: &FaultCommand, timeout: Duration) -> Result<(), String> {
        match self.handle() {
            Some(Handle::InProcess(h)) => h.control(cmd),
            Some(Handle::Subprocess(c)) => {
                let body = serde_json::to_vec(cmd).expect("fault command");
                let env = Envelope::request("kernel", CONTROL_DESTINATION, body);
                let reply = c.call(env, timeout).await.map_err(|e| e.to_string())?;
                let v: serde_json::Value = reply.body_json().map_err(|e| e.to_string())?;
                match v.get("error").and_then(|e| e.as_str()) {
                    Some(err) => Err(err.to_string()),
                    None => Ok(()),
                }
            }
            None => Err("instance has no endpoint".into()),
        }
    }

    /// Releases the endpoint. Subprocesses get `grace` to exit on their own.
    pub async fn stop(&self, grace: Duration) -> StopOutcome {
        let ep = self.endpoint.lock().take();
        match ep {
            Some(Endpoint::Subprocess(c)) => c.stop(grace).await,
            Some(Endpoint::InProcess { .. }) => StopOutcome::Exited,
            None => StopOutcome::AlreadyGone,
        }
    }
}
