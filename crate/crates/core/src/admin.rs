//! Admin HTTP API. Every error is `{"error": code, "message": text}` with
//! the matching status.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::KernelError;
use crate::fault::{Fault, FaultCommand};
use crate::kernel::KernelHandle;
use crate::monitor::{Aggregation, AlertRule, HistorySource, Metric};
use crate::registry::ModuleDescriptor;
use crate::servers::Permission;
use crate::service::RecoveryMode;

type K = State<Arc<KernelHandle>>;

pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "BadRequest".into(),
            message: message.into(),
        }
    }
}

impl From<KernelError> for ApiError {
    fn from(e: KernelError) -> Self {
        Self {
            status: StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn ok<T: serde::Serialize>(v: T) -> ApiResult {
    serde_json::to_value(v)
        .map(Json)
        .map_err(|e| ApiError::bad_request(e.to_string()))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body: {e}")))
}

fn audit(k: &KernelHandle, action: &str, detail: impl Into<String>) {
    k.servers.auth.audit_append("admin", action, detail);
}

pub fn router(k: Arc<KernelHandle>) -> Router {
    let mut r = Router::new()
        .route("/admin/modules", get(list_modules).post(register_module))
        .route("/admin/modules/{id}", get(get_module).delete(unregister_module))
        .route("/admin/modules/{id}/deploy", post(deploy))
        .route("/admin/modules/{id}/rollback", post(rollback))
        .route("/admin/modules/{id}/scale", post(scale))
        .route("/admin/modules/{id}/deployments", get(deployments))
        .route("/admin/modules/{id}/fault", post(inject_fault))
        .route("/admin/instances", get(instances))
        .route("/admin/instances/{id}/restart", post(restart_instance))
        .route("/admin/tasks", get(tasks))
        .route("/admin/snapshot", get(snapshot))
        .route("/admin/metrics", get(metrics))
        .route("/admin/trace/{request_id}", get(trace))
        .route("/admin/alerts", get(alerts).post(upsert_alert))
        .route("/admin/events", get(events))
        .route("/admin/mapek/knowledge", get(knowledge))
        .route("/admin/mapek/cycles", get(cycles))
        .route("/admin/mapek/mode", get(get_mode).post(set_mode))
        .route("/admin/audit", get(audit_list))
        .route("/admin/auth/roles", post(set_role));
    if let Some(dir) = &k.cfg.console_dir {
        r = r.nest_service("/console", tower_http::services::ServeDir::new(dir));
    }
    r.with_state(k)
}

async fn list_modules(State(k): K) -> ApiResult {
    let mut out = Vec::new();
    for id in k.registry.module_ids() {
        if let Ok((desc, inst)) = k.services.lookup(&id) {
            out.push(json!({
                "descriptor": desc,
                "kernel_server": k.registry.is_kernel_server(&id),
                "instances": inst,
            }));
        }
    }
    ok(out)
}

async fn register_module(State(k): K, body: axum::body::Bytes) -> Result<(StatusCode, Json<Value>), ApiError> {
    let desc: ModuleDescriptor = parse_body(&body)?;
    let id = desc.module_id.clone();
    k.services.register_module(desc).await?;
    audit(&k, "register", &id);
    let (desc, inst) = k.services.lookup(&id)?;
    Ok((StatusCode::CREATED, Json(json!({"descriptor": desc, "instances": inst}))))
}

async fn get_module(State(k): K, Path(id): Path<String>) -> ApiResult {
    let (desc, inst) = k.services.lookup(&id)?;
    ok(json!({
        "descriptor": desc,
        "kernel_server": k.registry.is_kernel_server(&id),
        "instances": inst,
        "deployments": k.registry.deployments(&id)?,
    }))
}

async fn unregister_module(State(k): K, Path(id): Path<String>) -> ApiResult {
    k.services.unregister_module(&id).await?;
    audit(&k, "unregister", &id);
    ok(json!({"removed": id}))
}

#[derive(Deserialize)]
struct DeployBody {
    version: String,
    artifact_ref: String,
}

async fn deploy(State(k): K, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult {
    let b: DeployBody = parse_body(&body)?;
    let d = k.services.deploy(&id, &b.version, &b.artifact_ref).await?;
    audit(&k, "deploy", format!("{id} -> {}", b.version));
    ok(d)
}

async fn rollback(State(k): K, Path(id): Path<String>) -> ApiResult {
    let d = k.services.rollback(&id).await?;
    audit(&k, "rollback", format!("{id} -> {}", d.version));
    ok(d)
}

#[derive(Deserialize)]
struct ScaleBody {
    replicas: i64,
}

async fn scale(State(k): K, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult {
    let b: ScaleBody = parse_body(&body)?;
    let n = u32::try_from(b.replicas).map_err(|_| KernelError::InvalidReplicas)?;
    k.services.scale(&id, n).await?;
    audit(&k, "scale", format!("{id} -> {n}"));
    let (_, inst) = k.services.lookup(&id)?;
    ok(json!({"module_id": id, "replicas": n, "instances": inst}))
}

async fn deployments(State(k): K, Path(id): Path<String>) -> ApiResult {
    ok(k.registry.deployments(&id)?)
}

/// Accepts either `{"fault": {...}, "seed": n}` or a short form
/// `{"spec": "leak:1048576", "seed": n}`.
async fn inject_fault(State(k): K, Path(id): Path<String>, body: axum::body::Bytes) -> ApiResult {
    let v: Value = parse_body(&body)?;
    let cmd = if let Some(spec) = v.get("spec").and_then(Value::as_str) {
        let fault: Fault = spec.parse().map_err(ApiError::bad_request)?;
        FaultCommand {
            fault,
            seed: v.get("seed").and_then(Value::as_u64).unwrap_or(0),
        }
    } else {
        serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("body: {e}")))?
    };
    k.services.inject_fault(&id, cmd.clone()).await?;
    audit(&k, "inject_fault", format!("{id}: {:?}", cmd.fault));
    ok(json!({"module_id": id, "fault": cmd.fault, "seed": cmd.seed}))
}

async fn instances(State(k): K) -> ApiResult {
    ok(k.services.instances_by_module())
}

async fn restart_instance(State(k): K, Path(id): Path<String>) -> ApiResult {
    let new_id = k.services.restart_instance(&id).await?;
    audit(&k, "restart", format!("{id} -> {new_id}"));
    ok(json!({"replaced": id, "instance_id": new_id}))
}

async fn tasks(State(k): K) -> ApiResult {
    ok(k.scheduler.view())
}

async fn snapshot(State(k): K) -> ApiResult {
    let view = k.scheduler.view();
    let mut queues = BTreeMap::new();
    queues.insert("scheduler.ready".to_string(), view.ready);
    queues.insert("scheduler.timers".to_string(), view.timers);
    let snap = k.monitor.snapshot(
        k.clock.now_ms(),
        k.services.module_states(),
        queues,
        k.services.mode().as_str(),
    );
    ok(snap)
}

#[derive(Deserialize)]
struct MetricsQuery {
    /// A metric name, `requests` or `errors`.
    source: Option<String>,
    target: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
    aggregation: Option<String>,
}

fn parse_source(s: &str) -> Result<HistorySource, ApiError> {
    Ok(match s {
        "requests" => HistorySource::Requests,
        "errors" => HistorySource::Errors,
        other => HistorySource::Metric(
            serde_json::from_value::<Metric>(Value::String(other.to_string()))
                .map_err(|_| ApiError::bad_request(format!("unknown source {other:?}")))?,
        ),
    })
}

fn parse_aggregation(s: &str) -> Result<Aggregation, ApiError> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "p95" => Aggregation::P95,
        "mean" => Aggregation::Mean,
        "max" => Aggregation::Max,
        "rate" => Aggregation::Rate,
        other => return Err(ApiError::bad_request(format!("unknown aggregation {other:?}"))),
    })
}

async fn metrics(State(k): K, Query(q): Query<MetricsQuery>) -> ApiResult {
    let source = parse_source(q.source.as_deref().unwrap_or("LatencyUs"))?;
    let agg = parse_aggregation(q.aggregation.as_deref().unwrap_or("mean"))?;
    let now = k.clock.now_ms();
    let to = q.to.unwrap_or(now);
    let from = q.from.unwrap_or(to.saturating_sub(60_000));
    let target = q.target.unwrap_or_else(|| "*".into());
    let points = k
        .monitor
        .query_history(source, &target, from, to, agg)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    ok(json!({"target": target, "from": from, "to": to, "points": points}))
}

async fn trace(State(k): K, Path(request_id): Path<String>) -> ApiResult {
    let events = k.monitor.trace_request(&request_id);
    if events.is_empty() {
        return Err(ApiError {
            status: StatusCode::NOT_FOUND,
            code: "UnknownRequest".into(),
            message: format!("no trace for {request_id}"),
        });
    }
    ok(json!({"request_id": request_id, "events": events}))
}

async fn alerts(State(k): K) -> ApiResult {
    ok(json!({"rules": k.monitor.rules(), "statuses": k.monitor.alert_statuses()}))
}

async fn upsert_alert(State(k): K, body: axum::body::Bytes) -> ApiResult {
    let rule: AlertRule = parse_body(&body)?;
    k.monitor
        .upsert_rule(rule.clone())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    audit(&k, "alert_rule", &rule.rule_id);
    ok(rule)
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
    timeout_ms: Option<u64>,
}

async fn events(State(k): K, Query(q): Query<EventsQuery>) -> ApiResult {
    let timeout = Duration::from_millis(q.timeout_ms.unwrap_or(25_000).min(60_000));
    ok(k.feed.wait(q.since.unwrap_or(0), timeout).await)
}

async fn knowledge(State(k): K) -> ApiResult {
    ok(k.mapek.knowledge().entries())
}

#[derive(Deserialize)]
struct CyclesQuery {
    last: Option<usize>,
}

async fn cycles(State(k): K, Query(q): Query<CyclesQuery>) -> ApiResult {
    ok(k.mapek.cycles(q.last.unwrap_or(10)))
}

async fn get_mode(State(k): K) -> ApiResult {
    ok(json!({"mode": k.services.mode().as_str()}))
}

#[derive(Deserialize)]
struct ModeBody {
    mode: String,
}

async fn set_mode(State(k): K, body: axum::body::Bytes) -> ApiResult {
    let b: ModeBody = parse_body(&body)?;
    let mode: RecoveryMode = b.mode.parse().map_err(ApiError::bad_request)?;
    let prev = k.services.mode();
    k.services.set_mode(mode);
    audit(&k, "mapek_mode", format!("{} -> {}", prev.as_str(), mode.as_str()));
    ok(json!({"mode": mode.as_str(), "previous": prev.as_str()}))
}

#[derive(Deserialize)]
struct AuditQuery {
    since: Option<u64>,
}

async fn audit_list(State(k): K, Query(q): Query<AuditQuery>) -> ApiResult {
    ok(k.servers.auth.audit().since(q.since.unwrap_or(0)))
}

#[derive(Deserialize)]
struct RoleBody {
    role: String,
    permissions: BTreeSet<Permission>,
}

async fn set_role(State(k): K, body: axum::body::Bytes) -> ApiResult {
    let b: RoleBody = parse_body(&body)?;
    k.servers.auth.set_role("admin", &b.role, b.permissions);
    ok(json!({"role": b.role}))
}
