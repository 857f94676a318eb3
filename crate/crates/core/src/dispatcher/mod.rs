//! Request entry point: route resolution, instance selection, forwarding and
//! accounting.

mod http;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use http::edge_router;

use crate::clock::{EpochMs, SharedClock};
use crate::handler::HandlerRequest;
use crate::monitor::stats::{fnv1a, input_digest};
use crate::monitor::{IoRecord, Level, Metric, MetricSample, Monitor};
use crate::registry::{InstanceState, Registry, Strategy};
use crate::service::{ForwardError, LiveInstance, ServiceManager};

pub const DEFAULT_UPSTREAM_TIMEOUT: Duration = Duration::from_secs(10);

/// Picks an index into `instances` (state, active requests), or `None` when
/// nothing is Ready or Degraded.
///
/// RoundRobin cycles the serving instances in registration order.
/// LeastConnections takes the fewest active requests, Ready before
/// Degraded, then registration order.
pub fn select_instance(instances: &[(InstanceState, u64)], strategy: Strategy, cursor: &AtomicUsize) -> Option<usize> {
    let serving: Vec<usize> = (0..instances.len()).filter(|&i| instances[i].0.is_serving()).collect();
    if serving.is_empty() {
        return None;
    }
    match strategy {
        Strategy::RoundRobin => {
            let k = cursor.fetch_add(1, Ordering::Relaxed) % serving.len();
            Some(serving[k])
        }
        Strategy::LeastConnections => serving
            .into_iter()
            .min_by_key(|&i| (instances[i].0 == InstanceState::Degraded, instances[i].1, i)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub method: String,
    pub path: String,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
    pub received_at: EpochMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub request_id: String,
    pub status: u16,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
    pub served_by: Option<String>,
    pub module_id: Option<String>,
    pub latency_us: u64,
}

pub struct Dispatcher {
    registry: Arc<Registry>,
    services: Arc<ServiceManager>,
    monitor: Arc<Monitor>,
    clock: SharedClock,
    default_timeout: Duration,
    seq: AtomicU64,
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher").finish_non_exhaustive()
    }
}

struct Outcome {
    status: u16,
    headers: BTreeMap<String, String>,
    body: Vec<u8>,
    module_id: Option<String>,
    served_by: Option<String>,
    transport_error: bool,
}

impl Outcome {
    fn kernel(status: u16, module_id: Option<String>, msg: impl Into<String>) -> Self {
        Self {
            status,
            headers: BTreeMap::new(),
            body: msg.into().into_bytes(),
            module_id,
            served_by: None,
            transport_error: false,
        }
    }
}

/// Decrements a module's in-flight counter on drop.
struct Inflight<'a>(&'a AtomicU64);

impl Drop for Inflight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Dispatcher {
    pub fn new(services: Arc<ServiceManager>, clock: SharedClock, default_timeout: Duration) -> Self {
        Self {
            registry: services.registry().clone(),
            monitor: services.monitor().clone(),
            services,
            clock,
            default_timeout,
            seq: AtomicU64::new(0),
        }
    }

    pub fn new_request(&self, method: &str, path: &str, body: Vec<u8>) -> Request {
        let n = self.seq.fetch_add(1, Ordering::SeqCst) + 1;
        Request {
            request_id: format!("req-{n}"),
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            headers: BTreeMap::new(),
            body,
            received_at: self.clock.now_ms(),
        }
    }

    /// Resolves `(method, path)` to a module id.
    pub fn resolve(&self, method: &str, path: &str) -> Option<(String, Strategy)> {
        self.registry
            .routes()
            .resolve(method, path)
            .map(|e| (e.module_id.clone(), e.strategy))
    }

    pub async fn dispatch(&self, req: Request) -> Response {
        let started = Instant::now();
        let rid = req.request_id.clone();
        self.monitor.log(
            self.clock.now_ms(),
            Level::Info,
            "dispatcher",
            format!("dispatch {} {}", req.method, req.path),
            Some(&rid),
        );
        let digest_in = input_digest(&req.method, &req.path, &req.body);
        let out = self.route(&req).await;
        let latency_us = started.elapsed().as_micros() as u64;
        let at = self.clock.now_ms();
        let module_id = out.module_id.clone().unwrap_or_default();
        let instance_id = out.served_by.clone().unwrap_or_default();
        let error = out.transport_error || IoRecord::is_error_status(out.status);
        self.monitor.record_sample(MetricSample {
            at,
            module_id: module_id.clone(),
            instance_id: instance_id.clone(),
            metric: Metric::LatencyUs,
            value: latency_us as f64,
        });
        self.monitor.record_io(IoRecord {
            at,
            module_id,
            instance_id: instance_id.clone(),
            request_id: rid.clone(),
            input_digest: digest_in,
            output_status: out.status,
            output_digest: fnv1a(&out.body),
            error,
        });
        let (level, source) = if error {
            (Level::Error, if instance_id.is_empty() { "dispatcher" } else { instance_id.as_str() })
        } else {
            (Level::Info, "dispatcher")
        };
        let msg = if error {
            format!("response {} error: {}", out.status, String::from_utf8_lossy(&out.body))
        } else {
            format!("response {}", out.status)
        };
        self.monitor.log(at, level, source, msg, Some(&rid));
        Response {
            request_id: rid,
            status: out.status,
            headers: out.headers,
            body: out.body,
            served_by: out.served_by,
            module_id: out.module_id,
            latency_us,
        }
    }

    async fn route(&self, req: &Request) -> Outcome {
        let Some((module_id, strategy)) = self.resolve(&req.method, &req.path) else {
            return Outcome::kernel(404, None, "no route");
        };
        let Ok((rt, quota, demand, timeout_ms)) = self.registry.read(&module_id, |e| {
            (
                e.rt.clone(),
                e.desc.quota.max_concurrent_requests,
                e.desc.demand_loaded,
                e.desc.upstream_timeout_ms,
            )
        }) else {
            return Outcome::kernel(404, None, "no route");
        };
        let inflight = rt.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        let _inflight = Inflight(&rt.inflight);
        if inflight > quota as u64 {
            return Outcome::kernel(429, Some(module_id), "quota exceeded");
        }
        rt.last_dispatch.store(self.clock.now_ms(), Ordering::SeqCst);

        let mut loaded = false;
        let mut picked: Option<(Arc<LiveInstance>, _)> = None;
        for _ in 0..4 {
            let instances = self.registry.instances(&module_id).unwrap_or_default();
            let states: Vec<(InstanceState, u64)> =
                instances.iter().map(|i| (i.state(), i.active_requests())).collect();
            match select_instance(&states, strategy, &rt.rr) {
                Some(i) => {
                    let inst = instances[i].clone();
                    let guard = inst.begin_request();
                    // A drain that started after selection sees the guard; one
                    // that started before is visible here.
                    if inst.state().is_serving() {
                        picked = Some((inst, guard));
                        break;
                    }
                }
                None if demand && !loaded => {
                    loaded = true;
                    if let Err(e) = self.services.ensure_loaded(&module_id).await {
                        return Outcome::kernel(503, Some(module_id), format!("no ready instance: {e}"));
                    }
                }
                None => break,
            }
        }
        let Some((inst, _guard)) = picked else {
            return Outcome::kernel(503, Some(module_id), "no ready instance");
        };

        self.monitor.log(
            self.clock.now_ms(),
            Level::Info,
            &inst.instance_id,
            format!("forward to {} {}", inst.instance_id, inst.version),
            Some(&req.request_id),
        );
        let mut hreq = HandlerRequest::new(&req.method, &req.path, req.body.clone());
        hreq.request_id = req.request_id.clone();
        hreq.headers = req.headers.clone();
        let timeout = timeout_ms.map(Duration::from_millis).unwrap_or(self.default_timeout);
        let result = inst.forward(hreq, timeout).await;
        rt.last_dispatch.store(self.clock.now_ms(), Ordering::SeqCst);
        let served_by = Some(inst.instance_id.clone());
        match result {
            Ok(resp) => Outcome {
                status: resp.status.clamp(100, 599),
                headers: resp.headers,
                body: resp.body,
                module_id: Some(module_id),
                served_by,
                transport_error: false,
            },
            Err(ForwardError::Timeout) => Outcome {
                served_by,
                ..Outcome::kernel(504, Some(module_id), "upstream timeout")
            },
            Err(ForwardError::Transport(e)) => Outcome {
                served_by,
                transport_error: true,
                ..Outcome::kernel(502, Some(module_id), format!("upstream failure: {e}"))
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use InstanceState::*;

    #[test]
    fn round_robin_cycles_in_registration_order() {
        let c = AtomicUsize::new(0);
        let s = [(Ready, 0), (Ready, 0), (Ready, 0)];
        let picks: Vec<_> = (0..6).map(|_| select_instance(&s, Strategy::RoundRobin, &c).unwrap()).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn least_connections_takes_minimum() {
        let c = AtomicUsize::new(0);
        let s = [(Ready, 2), (Ready, 0), (Ready, 1)];
        assert_eq!(select_instance(&s, Strategy::LeastConnections, &c), Some(1));
        let tie = [(Ready, 1), (Ready, 1)];
        assert_eq!(select_instance(&tie, Strategy::LeastConnections, &c), Some(0));
        let degraded = [(Degraded, 0), (Ready, 3)];
        assert_eq!(select_instance(&degraded, Strategy::LeastConnections, &c), Some(1));
    }

    #[test]
    fn unhealthy_never_selected() {
        let c = AtomicUsize::new(0);
        let s = [(Unhealthy, 0), (Stopping, 0), (Starting, 0)];
        assert_eq!(select_instance(&s, Strategy::RoundRobin, &c), None);
        assert_eq!(select_instance(&s, Strategy::LeastConnections, &c), None);
        let s = [(Unhealthy, 0), (Degraded, 5)];
        for _ in 0..5 {
            assert_eq!(select_instance(&s, Strategy::RoundRobin, &c), Some(1));
        }
    }
}
