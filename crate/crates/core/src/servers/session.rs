use std::collections::{BTreeMap, HashMap};

use parking_lot::Mutex;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::clock::{EpochMs, SharedClock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub created_at: EpochMs,
    pub last_touched_at: EpochMs,
    pub ttl_s: u64,
    #[serde(default)]
    pub data: BTreeMap<String, serde_json::Value>,
}

impl Session {
    pub fn is_expired(&self, now: EpochMs) -> bool {
        now.saturating_sub(self.last_touched_at) > self.ttl_s * 1000
    }
}

/// 128 bits from the OS generator, lower-case hex.
pub fn new_session_id() -> String {
    let mut b = [0u8; 16];
    OsRng.fill_bytes(&mut b);
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Sessions with sliding expiry. Several sessions per user are allowed.
#[derive(Debug)]
pub struct SessionStore {
    clock: SharedClock,
    default_ttl_s: u64,
    map: Mutex<HashMap<String, Session>>,
}

impl SessionStore {
    pub fn new(clock: SharedClock) -> Self {
        Self::with_default_ttl(clock, 1800)
    }

    pub fn with_default_ttl(clock: SharedClock, default_ttl_s: u64) -> Self {
        Self {
            clock,
            default_ttl_s,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn default_ttl_s(&self) -> u64 {
        self.default_ttl_s
    }

    pub fn create(&self, user_id: &str, ttl_s: u64) -> Result<Session, ServerError> {
        if ttl_s == 0 {
            return Err(ServerError::InvalidArgument("ttl_s must be positive".into()));
        }
        let now = self.clock.now_ms();
        let s = Session {
            session_id: new_session_id(),
            user_id: user_id.to_string(),
            created_at: now,
            last_touched_at: now,
            ttl_s,
            data: BTreeMap::new(),
        };
        self.map.lock().insert(s.session_id.clone(), s.clone());
        Ok(s)
    }

    /// Returns the session and refreshes its expiry. An expired session is
    /// removed on the way out.
    pub fn get(&self, session_id: &str) -> Result<Session, ServerError> {
        self.with(session_id, |_| ())
    }

    pub fn set(&self, session_id: &str, key: &str, value: serde_json::Value) -> Result<Session, ServerError> {
        self.with(session_id, |s| {
            s.data.insert(key.to_string(), value);
        })
    }

    fn with(&self, session_id: &str, f: impl FnOnce(&mut Session)) -> Result<Session, ServerError> {
        let now = self.clock.now_ms();
        let mut map = self.map.lock();
        let s = map.get_mut(session_id).ok_or(ServerError::NotFound)?;
        if s.is_expired(now) {
            map.remove(session_id);
            return Err(ServerError::Expired);
        }
        s.last_touched_at = now;
        f(s);
        Ok(s.clone())
    }

    pub fn invalidate(&self, session_id: &str) {
        self.map.lock().remove(session_id);
    }

    pub fn purge_expired(&self) -> usize {
        let now = self.clock.now_ms();
        let mut map = self.map.lock();
        let before = map.len();
        map.retain(|_, s| !s.is_expired(now));
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn store() -> (std::sync::Arc<ManualClock>, SessionStore) {
        let c = ManualClock::new(1_000_000);
        (c.clone(), SessionStore::new(c))
    }

    #[test]
    fn get_touches() {
        let (c, st) = store();
        let s = st.create("u", 60).unwrap();
        assert_eq!(s.session_id.len(), 32);
        c.advance(10_000);
        let g = st.get(&s.session_id).unwrap();
        assert_eq!(g.session_id, s.session_id);
        assert_eq!(g.last_touched_at, s.created_at + 10_000);
    }

    #[test]
    fn expiry_removes() {
        let (c, st) = store();
        let s = st.create("u", 1).unwrap();
        c.advance(2000);
        assert_eq!(st.get(&s.session_id), Err(ServerError::Expired));
        assert_eq!(st.get(&s.session_id), Err(ServerError::NotFound));
    }

    #[test]
    fn invalidate_is_idempotent() {
        let (_c, st) = store();
        let s = st.create("u", 5).unwrap();
        st.invalidate(&s.session_id);
        st.invalidate(&s.session_id);
        assert_eq!(st.get(&s.session_id), Err(ServerError::NotFound));
        assert!(st.create("u", 0).is_err());
    }

    #[test]
    fn data_and_many_sessions_per_user() {
        let (_c, st) = store();
        let a = st.create("u", 5).unwrap();
        let b = st.create("u", 5).unwrap();
        assert_ne!(a.session_id, b.session_id);
        st.set(&a.session_id, "cart", serde_json::json!([1, 2])).unwrap();
        assert_eq!(st.get(&a.session_id).unwrap().data["cart"], serde_json::json!([1, 2]));
        assert!(st.get(&b.session_id).unwrap().data.is_empty());
    }
}
