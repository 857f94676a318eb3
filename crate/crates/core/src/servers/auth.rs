use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use hmac::{Hmac, Mac};
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ServerError;
use crate::clock::{EpochMs, SharedClock};

type HmacSha256 = Hmac<Sha256>;

// ---- tokens ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub user_id: String,
    pub roles: Vec<String>,
    /// Expiry, epoch seconds.
    pub exp: u64,
}

#[derive(Clone)]
pub struct TokenSigner {
    secret: Vec<u8>,
}

impl std::fmt::Debug for TokenSigner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenSigner(..)")
    }
}

impl TokenSigner {
    pub fn new(secret: &[u8]) -> Self {
        Self { secret: secret.to_vec() }
    }

    fn mac(&self, payload: &str) -> HmacSha256 {
        let mut m = HmacSha256::new_from_slice(&self.secret).expect("hmac takes any key length");
        m.update(payload.as_bytes());
        m
    }

    /// `payload.signature`, both base64url without padding.
    pub fn issue(&self, claims: &Claims) -> String {
        let payload = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
        let sig = URL_SAFE_NO_PAD.encode(self.mac(&payload).finalize().into_bytes());
        format!("{payload}.{sig}")
    }

    /// Signature first, then expiry.
    pub fn verify(&self, token: &str, now: EpochMs) -> Result<Claims, ServerError> {
        let (payload, sig) = token.split_once('.').ok_or(ServerError::Malformed)?;
        let sig = URL_SAFE_NO_PAD.decode(sig).map_err(|_| ServerError::Malformed)?;
        self.mac(payload)
            .verify_slice(&sig)
            .map_err(|_| ServerError::BadSignature)?;
        let raw = URL_SAFE_NO_PAD.decode(payload).map_err(|_| ServerError::Malformed)?;
        let claims: Claims = serde_json::from_slice(&raw).map_err(|_| ServerError::Malformed)?;
        if claims.exp * 1000 < now {
            return Err(ServerError::ExpiredToken);
        }
        Ok(claims)
    }
}

// ---- RBAC -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Read,
    Write,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Permission {
    /// A resource name or `*` for every resource.
    pub resource: String,
    pub action: Action,
}

impl Permission {
    pub fn new(resource: &str, action: Action) -> Self {
        Self {
            resource: resource.to_string(),
            action,
        }
    }

    pub fn grants(&self, resource: &str, action: Action) -> bool {
        self.action == action && (self.resource == "*" || self.resource == resource)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RbacPolicy {
    pub roles: BTreeMap<String, BTreeSet<Permission>>,
}

impl RbacPolicy {
    pub fn grant(&mut self, role: &str, perm: Permission) {
        self.roles.entry(role.to_string()).or_default().insert(perm);
    }

    /// Allow iff some role held grants the pair.
    pub fn authorize(&self, roles: &[String], resource: &str, action: Action) -> Decision {
        let ok = roles
            .iter()
            .filter_map(|r| self.roles.get(r))
            .flatten()
            .any(|p| p.grants(resource, action));
        if ok {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }
}

// ---- credentials ----------------------------------------------------------

pub type HashFn = fn(salt: &str, password: &str) -> String;

pub fn sha256_hex(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(password.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Credential {
    salt: String,
    hash: String,
    roles: Vec<String>,
}

/// Lines of `user_id:salt:hash[:role,role]`; `#` starts a comment.
#[derive(Debug, Clone)]
pub struct CredentialStore {
    users: HashMap<String, Credential>,
    hash: HashFn,
}

impl Default for CredentialStore {
    fn default() -> Self {
        Self {
            users: HashMap::new(),
            hash: sha256_hex,
        }
    }
}

impl CredentialStore {
    pub fn with_hash(hash: HashFn) -> Self {
        Self {
            users: HashMap::new(),
            hash,
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut s = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(':').collect();
            if !(3..=4).contains(&parts.len()) || parts[0].is_empty() {
                return Err(format!("line {}: expected user_id:salt:hash[:roles]", n + 1));
            }
            let roles = parts
                .get(3)
                .map(|r| r.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect())
                .unwrap_or_default();
            s.users.insert(
                parts[0].to_string(),
                Credential {
                    salt: parts[1].to_string(),
                    hash: parts[2].to_ascii_lowercase(),
                    roles,
                },
            );
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }

    /// Adds or replaces a user with a fresh random salt.
    pub fn add_user(&mut self, user_id: &str, password: &str, roles: &[&str]) {
        let mut b = [0u8; 8];
        OsRng.fill_bytes(&mut b);
        let salt: String = b.iter().map(|x| format!("{x:02x}")).collect();
        let hash = (self.hash)(&salt, password);
        self.users.insert(
            user_id.to_string(),
            Credential {
                salt,
                hash,
                roles: roles.iter().map(|r| r.to_string()).collect(),
            },
        );
    }

    pub fn to_file_format(&self) -> String {
        let mut ids: Vec<_> = self.users.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| {
                let c = &self.users[id];
                format!("{id}:{}:{}:{}\n", c.salt, c.hash, c.roles.join(","))
            })
            .collect()
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.users.contains_key(user_id)
    }

    /// The user's roles when the password matches.
    pub fn check(&self, user_id: &str, password: &str) -> Option<Vec<String>> {
        let c = self.users.get(user_id)?;
        let got = (self.hash)(&c.salt, password);
        let same = got.len() == c.hash.len() && got.bytes().zip(c.hash.bytes()).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0;
        same.then(|| c.roles.clone())
    }
}

// ---- rate limiting --------------------------------------------------------

/// Fixed-window counters; windows start at epoch multiples of their length.
#[derive(Debug, Default)]
pub struct RateLimiter {
    counters: Mutex<HashMap<String, (u64, u64)>>,
}

impl RateLimiter {
    fn window(now: EpochMs, window_s: u64) -> u64 {
        now / (window_s.max(1) * 1000)
    }

    /// Counts one event and allows it when it is within `limit`.
    pub fn check(&self, key: &str, limit: u64, window_s: u64, now: EpochMs) -> Decision {
        let w = Self::window(now, window_s);
        let mut m = self.counters.lock();
        let e = m.entry(key.to_string()).or_insert((w, 0));
        if e.0 != w {
            *e = (w, 0);
        }
        e.1 += 1;
        if e.1 <= limit {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    /// Events counted so far in the current window.
    pub fn count(&self, key: &str, window_s: u64, now: EpochMs) -> u64 {
        let w = Self::window(now, window_s);
        match self.counters.lock().get(key) {
            Some((win, n)) if *win == w => *n,
            _ => 0,
        }
    }
}

// ---- audit ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: EpochMs,
    pub actor: String,
    pub action: String,
    pub detail: String,
}

/// Append-only; no API removes or edits an entry.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn append(&self, at: EpochMs, actor: &str, action: &str, detail: impl Into<String>) -> u64 {
        let mut e = self.entries.lock();
        let seq = e.len() as u64 + 1;
        e.push(AuditEntry {
            seq,
            at,
            actor: actor.to_string(),
            action: action.to_string(),
            detail: detail.into(),
        });
        seq
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.lock().clone()
    }

    pub fn since(&self, seq: u64) -> Vec<AuditEntry> {
        self.entries.lock().iter().filter(|e| e.seq > seq).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---- the server -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthConfig {
    pub token_ttl_s: u64,
    pub login_limit: u64,
    pub login_window_s: u64,
}

impl Default for AuthConfig {
    fn default() -> Self {
        Self {
            token_ttl_s: 3600,
            login_limit: 5,
            login_window_s: 60,
        }
    }
}

#[derive(Debug)]
pub struct AuthServer {
    clock: SharedClock,
    cfg: AuthConfig,
    signer: TokenSigner,
    creds: RwLock<CredentialStore>,
    policy: RwLock<RbacPolicy>,
    limiter: RateLimiter,
    audit: AuditLog,
}

impl AuthServer {
    pub fn new(clock: SharedClock, cfg: AuthConfig, secret: &[u8], creds: CredentialStore) -> Self {
        Self {
            clock,
            cfg,
            signer: TokenSigner::new(secret),
            creds: RwLock::new(creds),
            policy: RwLock::new(RbacPolicy::default()),
            limiter: RateLimiter::default(),
            audit: AuditLog::default(),
        }
    }

    pub fn signer(&self) -> &TokenSigner {
        &self.signer
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn credentials(&self) -> parking_lot::RwLockWriteGuard<'_, CredentialStore> {
        self.creds.write()
    }

    /// Failed attempts are counted per user; once `login_limit` failures
    /// fall in one window every attempt is refused until the window ends.
    pub fn login(&self, user_id: &str, password: &str) -> Result<String, ServerError> {
        let now = self.clock.now_ms();
        let key = format!("login:{user_id}");
        if self.limiter.count(&key, self.cfg.login_window_s, now) >= self.cfg.login_limit {
            self.audit.append(now, user_id, "login", "rate limited");
            return Err(ServerError::RateLimited);
        }
        let roles = self.creds.read().check(user_id, password);
        match roles {
            Some(roles) => {
                self.audit.append(now, user_id, "login", "ok");
                Ok(self.signer.issue(&Claims {
                    user_id: user_id.to_string(),
                    roles,
                    exp: now / 1000 + self.cfg.token_ttl_s,
                }))
            }
            None => {
                self.limiter.check(&key, self.cfg.login_limit, self.cfg.login_window_s, now);
                self.audit.append(now, user_id, "login", "bad credentials");
                Err(ServerError::BadCredentials)
            }
        }
    }

    pub fn verify(&self, token: &str) -> Result<Claims, ServerError> {
        self.signer.verify(token, self.clock.now_ms())
    }

    pub fn authorize(&self, roles: &[String], resource: &str, action: Action) -> Decision {
        self.policy.read().authorize(roles, resource, action)
    }

    pub fn rate_limit_check(&self, key: &str, limit: u64, window_s: u64) -> Result<Decision, ServerError> {
        if limit < 1 || window_s < 1 {
            return Err(ServerError::InvalidArgument("limit and window_s must be at least 1".into()));
        }
        Ok(self.limiter.check(key, limit, window_s, self.clock.now_ms()))
    }

    pub fn audit_append(&self, actor: &str, action: &str, detail: impl Into<String>) -> u64 {
        self.audit.append(self.clock.now_ms(), actor, action, detail)
    }

    pub fn policy(&self) -> RbacPolicy {
        self.policy.read().clone()
    }

    /// Replaces one role's permissions; audited.
    pub fn set_role(&self, actor: &str, role: &str, perms: BTreeSet<Permission>) {
        let detail = format!("role {role} = {} permissions", perms.len());
        self.policy.write().roles.insert(role.to_string(), perms);
        self.audit.append(self.clock.now_ms(), actor, "set_role", detail);
    }
}
