//! InProcess modules: the handler trait, the request/response shapes shared
//! with the subprocess protocol, and the built-in handlers.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::fault::{FaultCommand, FaultyService};

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// A request as seen by a module, in-process or over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerRequest {
    pub request_id: String,
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(with = "b64", default)]
    pub body: Vec<u8>,
}

impl HandlerRequest {
    pub fn new(method: &str, path: &str, body: Vec<u8>) -> Self {
        Self {
            request_id: String::new(),
            method: method.to_string(),
            path: path.to_string(),
            headers: BTreeMap::new(),
            body,
        }
    }

    pub fn query_param(&self, name: &str) -> Option<&str> {
        let (_, q) = self.path.split_once('?')?;
        q.split('&').find_map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            (k == name).then_some(v)
        })
    }

    pub fn path_only(&self) -> &str {
        self.path.split('?').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerResponse {
    pub status: u16,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(with = "b64", default)]
    pub body: Vec<u8>,
}

impl HandlerResponse {
    pub fn new(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            headers: BTreeMap::new(),
            body: body.into(),
        }
    }

    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self::new(200, body)
    }
}

/// Identity handed to a handler factory when an instance starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceContext {
    pub module_id: String,
    pub instance_id: String,
    pub version: String,
    pub artifact_ref: String,
}

#[async_trait]
pub trait Handler: Send + Sync {
    async fn handle(&self, req: HandlerRequest) -> HandlerResponse;

    /// Health check; `Ok` carries the memory self-report in bytes.
    fn health(&self) -> Result<u64, String> {
        Ok(0)
    }

    /// Names of the in-module heal hooks this handler offers.
    fn heal_hooks(&self) -> Vec<String> {
        Vec::new()
    }

    fn heal(&self, hook: &str) -> Result<(), String> {
        Err(format!("no heal hook {hook:?}"))
    }

    fn supports_control(&self) -> bool {
        false
    }

    fn control(&self, _cmd: &FaultCommand) -> Result<(), String> {
        Err("module has no control hook".into())
    }
}

pub type HandlerFactory = Arc<dyn Fn(&InstanceContext) -> Result<Arc<dyn Handler>, String> + Send + Sync>;

/// Named handler factories available to InProcess modules.
#[derive(Clone, Default)]
pub struct HandlerRegistry {
    map: Arc<RwLock<HashMap<String, HandlerFactory>>>,
}

impl std::fmt::Debug for HandlerRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut names: Vec<String> = self.map.read().keys().cloned().collect();
        names.sort();
        f.debug_struct("HandlerRegistry").field("handlers", &names).finish()
    }
}

impl HandlerRegistry {
    /// A registry preloaded with `echo`, `version-echo` and `fault-echo`.
    pub fn with_builtins() -> Self {
        let r = Self::default();
        r.register("echo", Arc::new(|_ctx: &InstanceContext| Ok(Arc::new(Echo) as Arc<dyn Handler>)));
        r.register(
            "version-echo",
            Arc::new(|ctx: &InstanceContext| {
                Ok(Arc::new(VersionEcho {
                    version: ctx.version.clone(),
                }) as Arc<dyn Handler>)
            }),
        );
        r.register(
            "fault-echo",
            Arc::new(|ctx: &InstanceContext| {
                Ok(Arc::new(FaultEcho {
                    svc: Mutex::new(FaultyService::new(ctx.version.clone(), FaultyService::DEFAULT_BASE_MEMORY)),
                }) as Arc<dyn Handler>)
            }),
        );
        r
    }

    pub fn register(&self, name: &str, factory: HandlerFactory) {
        self.map.write().insert(name.to_string(), factory);
    }

    pub fn register_fn<F>(&self, name: &str, f: F)
    where
        F: Fn(&InstanceContext) -> Arc<dyn Handler> + Send + Sync + 'static,
    {
        self.register(name, Arc::new(move |ctx: &InstanceContext| Ok(f(ctx))));
    }

    pub fn instantiate(&self, name: &str, ctx: &InstanceContext) -> Result<Arc<dyn Handler>, String> {
        let factory = self
            .map
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| format!("no handler named {name:?}"))?;
        factory(ctx)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.read().contains_key(name)
    }
}

async fn maybe_delay(req: &HandlerRequest) {
    if let Some(ms) = req.query_param("delay_ms").and_then(|v| v.parse::<u64>().ok()) {
        tokio::time::sleep(Duration::from_millis(ms)).await;
    }
}

/// Returns the request body. A `delay_ms` query parameter holds the reply.
pub struct Echo;

#[async_trait]
impl Handler for Echo {
    async fn handle(&self, req: HandlerRequest) -> HandlerResponse {
        maybe_delay(&req).await;
        HandlerResponse::ok(req.body)
    }
}

/// Replies with the version of the instance that served the request.
pub struct VersionEcho {
    version: String,
}

#[async_trait]
impl Handler for VersionEcho {
    async fn handle(&self, req: HandlerRequest) -> HandlerResponse {
        maybe_delay(&req).await;
        HandlerResponse::ok(self.version.clone().into_bytes())
    }
}

/// In-process twin of the subprocess test module: echoes, and accepts
/// fault injection and heal hooks.
pub struct FaultEcho {
    svc: Mutex<FaultyService>,
}

#[async_trait]
impl Handler for FaultEcho {
    async fn handle(&self, req: HandlerRequest) -> HandlerResponse {
        let (resp, delay) = self.svc.lock().respond(&req);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        resp
    }

    fn health(&self) -> Result<u64, String> {
        self.svc.lock().probe()
    }

    fn heal_hooks(&self) -> Vec<String> {
        FaultyService::HOOKS.iter().map(|s| s.to_string()).collect()
    }

    fn heal(&self, hook: &str) -> Result<(), String> {
        self.svc.lock().heal(hook)
    }

    fn supports_control(&self) -> bool {
        true
    }

    fn control(&self, cmd: &FaultCommand) -> Result<(), String> {
        self.svc.lock().apply(cmd);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(version: &str) -> InstanceContext {
        InstanceContext {
            module_id: "m".into(),
            instance_id: "m-1".into(),
            version: version.into(),
            artifact_ref: "x".into(),
        }
    }

    #[tokio::test]
    async fn builtins_resolve() {
        let r = HandlerRegistry::with_builtins();
        let echo = r.instantiate("echo", &ctx("1.0.0")).unwrap();
        let resp = echo.handle(HandlerRequest::new("POST", "/e", b"x".to_vec())).await;
        assert_eq!(resp, HandlerResponse::ok(b"x".to_vec()));
        let v = r.instantiate("version-echo", &ctx("2.1.0")).unwrap();
        assert_eq!(v.handle(HandlerRequest::new("GET", "/", vec![])).await.body, b"2.1.0");
        assert!(r.instantiate("missing", &ctx("1.0")).is_err());
    }

    #[test]
    fn query_params() {
        let req = HandlerRequest::new("GET", "/slow?x=1&delay_ms=250", vec![]);
        assert_eq!(req.query_param("delay_ms"), Some("250"));
        assert_eq!(req.query_param("y"), None);
        assert_eq!(req.path_only(), "/slow");
    }

    #[test]
    fn request_wire_shape() {
        let req = HandlerRequest::new("POST", "/a", b"hi".to_vec());
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["body"], "aGk=");
        let back: HandlerRequest = serde_json::from_value(v).unwrap();
        assert_eq!(back, req);
    }
}
