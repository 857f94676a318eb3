//! Resident kernel servers: sessions, authentication and authorization,
//! validation, events. Each is callable in-process and over the bus with a
//! JSON body `{"op": ..., "args": {...}}`.

pub mod auth;
pub mod event;
pub mod session;
pub mod validate;

use std::sync::Arc;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::clock::SharedClock;
use crate::handler::{Handler, HandlerRegistry, HandlerRequest, HandlerResponse};
use crate::isc::Bus;
use crate::registry::{ModuleDescriptor, RouteRule, Strategy};
use crate::scheduler::Scheduler;

pub use auth::{Action, AuthConfig, AuthServer, CredentialStore, Decision, Permission, RbacPolicy, TokenSigner};
pub use event::{EmitOpts, EventServer, Shaper, ShaperCounts};
pub use session::{Session, SessionStore};
pub use validate::{sanitize, RuleSet, ValidationReport, Validator};

pub const SESSION: &str = "kernel.session";
pub const AUTH: &str = "kernel.auth";
pub const VALIDATE: &str = "kernel.validate";
pub const EVENT: &str = "kernel.event";
pub const ALL: [&str; 4] = [SESSION, AUTH, VALIDATE, EVENT];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServerError {
    #[error("not found")]
    NotFound,
    #[error("expired")]
    Expired,
    #[error("bad credentials")]
    BadCredentials,
    #[error("rate limited")]
    RateLimited,
    #[error("bad signature")]
    BadSignature,
    #[error("token expired")]
    ExpiredToken,
    #[error("malformed token")]
    Malformed,
    #[error("unknown rule set")]
    UnknownRuleSet,
    #[error("debounce, throttle and delay are mutually exclusive")]
    ConflictingOpts,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
}

impl ServerError {
    pub fn code(&self) -> &'static str {
        match self {
            ServerError::NotFound => "NotFound",
            ServerError::Expired => "Expired",
            ServerError::BadCredentials => "BadCredentials",
            ServerError::RateLimited => "RateLimited",
            ServerError::BadSignature => "BadSignature",
            ServerError::ExpiredToken => "ExpiredToken",
            ServerError::Malformed => "Malformed",
            ServerError::UnknownRuleSet => "UnknownRuleSet",
            ServerError::ConflictingOpts => "ConflictingOpts",
            ServerError::InvalidArgument(_) => "InvalidArgument",
            ServerError::UnknownOp(_) => "UnknownOp",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            ServerError::NotFound | ServerError::UnknownRuleSet => 404,
            ServerError::Expired => 410,
            ServerError::BadCredentials
            | ServerError::BadSignature
            | ServerError::ExpiredToken
            | ServerError::Malformed => 401,
            ServerError::RateLimited => 429,
            ServerError::ConflictingOpts | ServerError::InvalidArgument(_) | ServerError::UnknownOp(_) => 400,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct Call {
    pub op: String,
    #[serde(default)]
    pub args: Value,
}

fn args<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ServerError> {
    serde_json::from_value(v).map_err(|e| ServerError::InvalidArgument(e.to_string()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("server types serialize")
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServersConfig {
    pub session_ttl_s: u64,
    pub auth: AuthConfig,
}

/// The four servers behind one handle.
#[derive(Debug)]
pub struct KernelServers {
    pub sessions: SessionStore,
    pub auth: AuthServer,
    pub validator: Validator,
    pub events: EventServer,
}

impl KernelServers {
    pub fn new(
        clock: SharedClock,
        bus: Bus,
        scheduler: Option<Scheduler>,
        secret: &[u8],
        creds: CredentialStore,
        cfg: ServersConfig,
    ) -> Arc<Self> {
        Arc::new(Self {
            sessions: SessionStore::with_default_ttl(clock.clone(), cfg.session_ttl_s),
            auth: AuthServer::new(clock.clone(), cfg.auth, secret, creds),
            validator: Validator::default(),
            events: EventServer::new(clock, bus, scheduler),
        })
    }

    /// Makes the servers available as InProcess handlers named after their
    /// module ids.
    pub fn install(self: &Arc<Self>, handlers: &HandlerRegistry) {
        for name in ALL {
            let me = self.clone();
            handlers.register(
                name,
                Arc::new(move |_ctx| {
                    Ok(Arc::new(ServerHandler {
                        servers: me.clone(),
                        name,
                    }) as Arc<dyn Handler>)
                }),
            );
        }
    }

    /// Resident descriptors, one route each under `/kernel/`.
    pub fn descriptors() -> Vec<ModuleDescriptor> {
        ALL.iter()
            .map(|id| {
                let mut d = ModuleDescriptor::in_process(id, id, &format!("/kernel/{}", &id["kernel.".len()..]));
                d.routes = vec![RouteRule::new("POST", &d.routes[0].path_prefix, Strategy::RoundRobin)];
                d
            })
            .collect()
    }

    /// Executes one `{op, args}` call against server `name`.
    pub fn call(&self, name: &str, call: Call) -> Result<Value, ServerError> {
        let a = call.args;
        match (name, call.op.as_str()) {
            (SESSION, "create") => {
                #[derive(Deserialize)]
                struct A {
                    user_id: String,
                    ttl_s: Option<u64>,
                }
                let A { user_id, ttl_s } = args(a)?;
                let ttl_s = ttl_s.unwrap_or(self.sessions.default_ttl_s());
                Ok(to_json(&self.sessions.create(&user_id, ttl_s)?))
            }
            (SESSION, "get") => {
                #[derive(Deserialize)]
                struct A {
                    session_id: String,
                }
                let A { session_id } = args(a)?;
                Ok(to_json(&self.sessions.get(&session_id)?))
            }
            (SESSION, "set") => {
                #[derive(Deserialize)]
                struct A {
                    session_id: String,
                    key: String,
                    value: Value,
                }
                let A { session_id, key, value } = args(a)?;
                Ok(to_json(&self.sessions.set(&session_id, &key, value)?))
            }
            (SESSION, "invalidate") => {
                #[derive(Deserialize)]
                struct A {
                    session_id: String,
                }
                let A { session_id } = args(a)?;
                self.sessions.invalidate(&session_id);
                Ok(json!({"ack": true}))
            }
            (AUTH, "login") => {
                #[derive(Deserialize)]
                struct A {
                    user_id: String,
                    credential: String,
                }
                let A { user_id, credential } = args(a)?;
                Ok(json!({"token": self.auth.login(&user_id, &credential)?}))
            }
            (AUTH, "verify") => {
                #[derive(Deserialize)]
                struct A {
                    token: String,
                }
                let A { token } = args(a)?;
                let c = self.auth.verify(&token)?;
                Ok(json!({"user_id": c.user_id, "roles": c.roles}))
            }
            (AUTH, "authorize") => {
                #[derive(Deserialize)]
                struct A {
                    roles: Vec<String>,
                    resource: String,
                    action: Action,
                }
                let A { roles, resource, action } = args(a)?;
                Ok(json!({"decision": self.auth.authorize(&roles, &resource, action)}))
            }
            (AUTH, "rate_limit_check") => {
                #[derive(Deserialize)]
                struct A {
                    key: String,
                    limit: u64,
                    window_s: u64,
                }
                let A { key, limit, window_s } = args(a)?;
                Ok(json!({"decision": self.auth.rate_limit_check(&key, limit, window_s)?}))
            }
            (AUTH, "audit_append") => {
                #[derive(Deserialize)]
                struct A {
                    actor: String,
                    action: String,
                    #[serde(default)]
                    detail: String,
                }
                let A { actor, action, detail } = args(a)?;
                Ok(json!({"seq": self.auth.audit_append(&actor, &action, detail)}))
            }
            (AUTH, "audit_list") => {
                #[derive(Deserialize, Default)]
                struct A {
                    #[serde(default)]
                    since: u64,
                }
                let A { since } = if a.is_null() { A::default() } else { args(a)? };
                Ok(to_json(&self.auth.audit().since(since)))
            }
            (VALIDATE, "register") => {
                let set: RuleSet = args(a)?;
                self.validator.register(set)?;
                Ok(json!({"ack": true}))
            }
            (VALIDATE, "validate") => {
                #[derive(Deserialize)]
                struct A {
                    ruleset: String,
                    record: serde_json::Map<String, Value>,
                }
                let A { ruleset, record } = args(a)?;
                Ok(to_json(&self.validator.validate(&record, &ruleset)?))
            }
            (VALIDATE, "sanitize") => {
                #[derive(Deserialize)]
                struct A {
                    value: String,
                }
                let A { value } = args(a)?;
                Ok(json!({"value": sanitize(&value)}))
            }
            (EVENT, "emit") => {
                #[derive(Deserialize)]
                struct A {
                    topic: String,
                    #[serde(default)]
                    payload: Value,
                    #[serde(default)]
                    opts: EmitOpts,
                }
                let A { topic, payload, opts } = args(a)?;
                let bytes = serde_json::to_vec(&payload).expect("json value serializes");
                self.events.emit(&topic, bytes, opts)?;
                Ok(json!({"ack": true}))
            }
            (EVENT, "stats") => Ok(to_json(&self.events.all_counts())),
            (_, op) => Err(ServerError::UnknownOp(op.to_string())),
        }
    }
}

struct ServerHandler {
    servers: Arc<KernelServers>,
    name: &'static str,
}

#[async_trait]
impl Handler for ServerHandler {
    async fn handle(&self, req: HandlerRequest) -> HandlerResponse {
        let result = serde_json::from_slice::<Call>(&req.body)
            .map_err(|e| ServerError::InvalidArgument(format!("body must be {{op, args}}: {e}")))
            .and_then(|c| self.servers.call(self.name, c));
        let (status, body) = match result {
            Ok(v) => (200, v),
            Err(e) => (e.status(), json!({"error": e.code(), "message": e.to_string()})),
        };
        let mut resp = HandlerResponse::new(status, serde_json::to_vec(&body).expect("json"));
        resp.headers.insert("content-type".into(), "application/json".into());
        resp
    }
}
