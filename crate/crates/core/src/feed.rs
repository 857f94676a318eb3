//! Sequenced feed of alert and MAPE-K events for long-polling clients.

use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::Notify;

use crate::clock::EpochMs;

const CAPACITY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedEvent {
    pub seq: u64,
    pub at: EpochMs,
    /// Bus topic the event came from.
    pub kind: String,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedPage {
    pub events: Vec<FeedEvent>,
    /// Pass back as `since` on the next poll.
    pub cursor: u64,
    /// The requested cursor fell out of the buffer; clients should refresh.
    pub gap: bool,
}

#[derive(Debug, Default)]
pub struct EventFeed {
    buf: Mutex<(u64, VecDeque<FeedEvent>)>,
    notify: Notify,
}

impl EventFeed {
    pub fn push(&self, at: EpochMs, kind: &str, body: serde_json::Value) -> u64 {
        let seq = {
            let mut g = self.buf.lock();
            g.0 += 1;
            let seq = g.0;
            g.1.push_back(FeedEvent {
                seq,
                at,
                kind: kind.to_string(),
                body,
            });
            while g.1.len() > CAPACITY {
                g.1.pop_front();
            }
            seq
        };
        self.notify.notify_waiters();
        seq
    }

    pub fn page(&self, since: u64) -> FeedPage {
        let g = self.buf.lock();
        let evicted = g.1.front().is_some_and(|e| since + 1 < e.seq);
        FeedPage {
            events: g.1.iter().filter(|e| e.seq > since).cloned().collect(),
            cursor: g.0,
            gap: since > g.0 || evicted,
        }
    }

    /// Returns as soon as there is something newer than `since`, or after
    /// `timeout` with an empty page.
    pub async fn wait(&self, since: u64, timeout: Duration) -> FeedPage {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.notify.notified();
            let page = self.page(since);
            if !page.events.is_empty() || page.gap {
                return page;
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return self.page(since);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn pages_from_cursor() {
        let f = EventFeed::default();
        f.push(1, "alerts", json!(1));
        f.push(2, "mapek", json!(2));
        let p = f.page(1);
        assert_eq!(p.events.len(), 1);
        assert_eq!(p.cursor, 2);
        assert!(!p.gap);
        assert!(f.page(2).events.is_empty());
        assert!(f.page(9).gap);
    }

    #[tokio::test]
    async fn wait_wakes_on_push() {
        let f = std::sync::Arc::new(EventFeed::default());
        let g = f.clone();
        let t = tokio::spawn(async move { g.wait(0, Duration::from_secs(5)).await });
        tokio::time::sleep(Duration::from_millis(20)).await;
        f.push(1, "alerts", json!("x"));
        let p = t.await.unwrap();
        assert_eq!(p.events[0].seq, 1);
        let empty = f.wait(1, Duration::from_millis(10)).await;
        assert!(empty.events.is_empty());
    }
}
