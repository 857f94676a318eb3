//! Request/reply routing and per-topic FIFO publish/subscribe.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

use super::envelope::{Envelope, Kind};
use crate::clock::{self, SharedClock};

/// Per-topic bound on unconsumed messages.
pub const DEFAULT_QUEUE_BOUND: usize = 10_000;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("timed out")]
    Timeout,
    #[error("remote error: {0}")]
    Remote(String),
}

/// Something that answers request envelopes: a kernel server, a module
/// instance, or a test stub.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, env: Envelope) -> Result<Envelope, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 100,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.max_attempts < 1 {
            return Err("max_attempts must be at least 1");
        }
        if self.base_backoff_ms == 0 {
            return Err("base_backoff_ms must be positive");
        }
        if !(self.multiplier >= 1.0) {
            return Err("multiplier must be at least 1");
        }
        Ok(())
    }

    /// Delay after the failed attempt number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis((self.base_backoff_ms as f64 * factor).round() as u64)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("unknown destination {0}")]
    UnknownDestination(String),
    #[error("invalid retry policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PublishError {
    #[error("topic {topic} holds {bound} unconsumed messages")]
    QueueFull { topic: String, bound: usize },
}

#[derive(Default)]
struct TopicState {
    log: VecDeque<(u64, Envelope)>,
    next_seq: u64,
    /// subscriber id -> next sequence number it will read
    cursors: HashMap<String, u64>,
    published: u64,
}

impl TopicState {
    fn compact(&mut self, now: u64) {
        match self.cursors.values().min().copied() {
            Some(min) => {
                while matches!(self.log.front(), Some((seq, _)) if *seq < min) {
                    self.log.pop_front();
                }
            }
            None => {
                while matches!(self.log.front(), Some((_, env)) if env.is_expired(now)) {
                    self.log.pop_front();
                }
            }
        }
    }
}

struct Topic {
    name: String,
    state: Mutex<TopicState>,
    cond: Condvar,
    notify: Notify,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopicStats {
    pub topic: String,
    pub depth: usize,
    pub subscribers: usize,
    pub published: u64,
}

struct BusInner {
    name: String,
    topics: Mutex<HashMap<String, Arc<Topic>>>,
    endpoints: RwLock<HashMap<String, Arc<dyn Transport>>>,
    queue_bound: usize,
    clock: SharedClock,
}

/// The inter-service bus. Cheap to clone.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<BusInner>,
}

impl std::fmt::Debug for Bus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Bus").field("name", &self.inner.name).finish()
    }
}

impl Default for Bus {
    fn default() -> Self {
        Self::new("kernel", clock::system())
    }
}

impl Bus {
    pub fn new(name: &str, clock: SharedClock) -> Self {
        Self::with_bound(name, clock, DEFAULT_QUEUE_BOUND)
    }

    pub fn with_bound(name: &str, clock: SharedClock, queue_bound: usize) -> Self {
        Self {
            inner: Arc::new(BusInner {
                name: name.to_string(),
                topics: Mutex::new(HashMap::new()),
                endpoints: RwLock::new(HashMap::new()),
                queue_bound,
                clock,
            }),
        }
    }

    pub fn register_endpoint(&self, name: &str, transport: Arc<dyn Transport>) {
        self.inner.endpoints.write().insert(name.to_string(), transport);
    }

    pub fn unregister_endpoint(&self, name: &str) {
        self.inner.endpoints.write().remove(name);
    }

    pub fn has_endpoint(&self, name: &str) -> bool {
        self.inner.endpoints.read().contains_key(name)
    }

    /// Sends a request to `dst`, retrying transport failures and timeouts
    /// with exponential backoff. Every attempt reuses the request id, so the
    /// returned reply always correlates with it.
    pub async fn request(
        &self,
        dst: &str,
        body: Vec<u8>,
        policy: RetryPolicy,
        timeout: Duration,
    ) -> Result<Envelope, RequestError> {
        policy.validate().map_err(RequestError::InvalidPolicy)?;
        let transport = self
            .inner
            .endpoints
            .read()
            .get(dst)
            .cloned()
            .ok_or_else(|| RequestError::UnknownDestination(dst.to_string()))?;
        let mut env = Envelope::request(&self.inner.name, dst, body);
        env.ttl_ms = (timeout.as_millis() as u64).max(1);
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts {
            match tokio::time::timeout(timeout, transport.send(env.clone())).await {
                Ok(Ok(reply)) if reply.kind == Kind::Reply && reply.correlation_id == env.id => {
                    return Ok(reply)
                }
                Ok(Ok(reply)) => {
                    last = format!(
                        "uncorrelated {} (corr {:?})",
                        reply.kind, reply.correlation_id
                    )
                }
                Ok(Err(e)) => last = e.to_string(),
                Err(_) => last = TransportError::Timeout.to_string(),
            }
            if attempt < policy.max_attempts {
                tokio::time::sleep(policy.backoff(attempt)).await;
            }
        }
        Err(RequestError::Exhausted {
            attempts: policy.max_attempts,
            last,
        })
    }

    fn topic(&self, name: &str) -> Arc<Topic> {
        self.inner
            .topics
            .lock()
            .entry(name.to_string())
            .or_insert_with(|| {
                Arc::new(Topic {
                    name: name.to_string(),
                    state: Mutex::new(TopicState::default()),
                    cond: Condvar::new(),
                    notify: Notify::new(),
                })
            })
            .clone()
    }

    /// Appends an Event envelope to `topic`. Topics are created on first use.
    pub fn publish(&self, topic: &str, body: Vec<u8>) -> Result<Envelope, PublishError> {
        let env = Envelope::new(Kind::Event, &self.inner.name, topic, body);
        self.publish_envelope(env)
    }

    pub fn publish_json<T: Serialize>(&self, topic: &str, value: &T) -> Result<Envelope, PublishError> {
        self.publish(topic, serde_json::to_vec(value).unwrap_or_default())
    }

    pub fn publish_envelope(&self, env: Envelope) -> Result<Envelope, PublishError> {
        let topic = self.topic(&env.destination);
        {
            let mut st = topic.state.lock();
            st.compact(self.inner.clock.now_ms());
            if st.log.len() >= self.inner.queue_bound {
                return Err(PublishError::QueueFull {
                    topic: topic.name.clone(),
                    bound: self.inner.queue_bound,
                });
            }
            let seq = st.next_seq;
            st.next_seq += 1;
            st.published += 1;
            st.log.push_back((seq, env.clone()));
        }
        topic.cond.notify_all();
        topic.notify.notify_waiters();
        Ok(env)
    }

    /// Subscribes `subscriber_id` to messages published from now on.
    /// Subscribing again with the same id returns a handle sharing the
    /// existing cursor.
    pub fn subscribe(&self, topic: &str, subscriber_id: &str) -> Subscription {
        let t = self.topic(topic);
        {
            let mut st = t.state.lock();
            let next = st.next_seq;
            st.cursors.entry(subscriber_id.to_string()).or_insert(next);
        }
        Subscription {
            topic: t,
            id: subscriber_id.to_string(),
            clock: self.inner.clock.clone(),
        }
    }

    pub fn topic_stats(&self) -> Vec<TopicStats> {
        let topics: Vec<Arc<Topic>> = self.inner.topics.lock().values().cloned().collect();
        let mut out: Vec<TopicStats> = topics
            .iter()
            .map(|t| {
                let st = t.state.lock();
                TopicStats {
                    topic: t.name.clone(),
                    depth: st.log.len(),
                    subscribers: st.cursors.len(),
                    published: st.published,
                }
            })
            .collect();
        out.sort_by(|a, b| a.topic.cmp(&b.topic));
        out
    }

    pub fn depth(&self, topic: &str) -> usize {
        let t = self.topic(topic);
        let mut st = t.state.lock();
        st.compact(self.inner.clock.now_ms());
        st.log.len()
    }
}

/// A subscriber's view of one topic. Delivery is FIFO in publish order.
pub struct Subscription {
    topic: Arc<Topic>,
    id: String,
    clock: SharedClock,
}

impl Subscription {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn topic(&self) -> &str {
        &self.topic.name
    }

    fn take(&self, st: &mut TopicState) -> Option<Envelope> {
        let cursor = *st.cursors.get(&self.id)?;
        let front = st.log.front().map(|(s, _)| *s)?;
        let idx = cursor.checked_sub(front).unwrap_or(0) as usize;
        let (seq, env) = st.log.get(idx).cloned()?;
        st.cursors.insert(self.id.clone(), seq + 1);
        st.compact(self.clock.now_ms());
        Some(env)
    }

    pub fn try_recv(&self) -> Option<Envelope> {
        let mut st = self.topic.state.lock();
        self.take(&mut st)
    }

    /// Blocks the calling thread until a message arrives or `timeout` passes.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Envelope> {
        let deadline = std::time::Instant::now() + timeout;
        let mut st = self.topic.state.lock();
        loop {
            if let Some(env) = self.take(&mut st) {
                return Some(env);
            }
            if !st.cursors.contains_key(&self.id) {
                return None;
            }
            if self.topic.cond.wait_until(&mut st, deadline).timed_out() {
                return self.take(&mut st);
            }
        }
    }

    pub async fn recv(&self) -> Option<Envelope> {
        loop {
            let notified = self.topic.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let mut st = self.topic.state.lock();
                if let Some(env) = self.take(&mut st) {
                    return Some(env);
                }
                if !st.cursors.contains_key(&self.id) {
                    return None;
                }
            }
            notified.await;
        }
    }

    /// Drains everything currently queued for this subscriber.
    pub fn drain(&self) -> Vec<Envelope> {
        let mut st = self.topic.state.lock();
        let mut out = Vec::new();
        while let Some(env) = self.take(&mut st) {
            out.push(env);
        }
        out
    }

    pub fn unsubscribe(self) {
        {
            let mut st = self.topic.state.lock();
            st.cursors.remove(&self.id);
            let now = self.clock.now_ms();
            st.compact(now);
        }
        self.topic.cond.notify_all();
        self.topic.notify.notify_waiters();
    }
}
