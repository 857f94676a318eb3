use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::clock::{EpochMs, SharedClock};
use crate::isc::Bus;
use crate::scheduler::{Scheduler, Step, TaskSpec, Trigger};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitOpts {
    #[serde(default)]
    pub delay_ms: Option<u64>,
    #[serde(default)]
    pub debounce_ms: Option<u64>,
    #[serde(default)]
    pub throttle_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShaperCounts {
    pub emitted: u64,
    pub published: u64,
    pub dropped: u64,
    pub pending: u64,
}

#[derive(Debug, Default)]
struct TopicState {
    window_start: Option<EpochMs>,
    pending: Option<(Vec<u8>, EpochMs)>,
    counts: ShaperCounts,
}

/// Debounce and throttle bookkeeping, driven by explicit timestamps.
///
/// Debounce keeps only the newest event of a burst and releases it once the
/// topic has been quiet for the window; superseded events count as dropped.
/// Throttle is leading-edge: an event opening a new window publishes, the
/// rest of the window is dropped.
#[derive(Debug, Default)]
pub struct Shaper {
    topics: BTreeMap<String, TopicState>,
}

pub type Release = (String, Vec<u8>);

impl Shaper {
    pub fn debounce(&mut self, topic: &str, payload: Vec<u8>, window_ms: u64, now: EpochMs) -> EpochMs {
        let t = self.topics.entry(topic.to_string()).or_default();
        t.counts.emitted += 1;
        if t.pending.is_some() {
            t.counts.dropped += 1;
        } else {
            t.counts.pending += 1;
        }
        let due = now + window_ms;
        t.pending = Some((payload, due));
        due
    }

    pub fn throttle(&mut self, topic: &str, payload: Vec<u8>, window_ms: u64, now: EpochMs) -> Option<Release> {
        let t = self.topics.entry(topic.to_string()).or_default();
        t.counts.emitted += 1;
        match t.window_start {
            Some(ws) if now < ws + window_ms => {
                t.counts.dropped += 1;
                None
            }
            _ => {
                t.window_start = Some(now);
                t.counts.published += 1;
                Some((topic.to_string(), payload))
            }
        }
    }

    /// Counts an unshaped publish.
    pub fn plain(&mut self, topic: &str) {
        let t = self.topics.entry(topic.to_string()).or_default();
        t.counts.emitted += 1;
        t.counts.published += 1;
    }

    /// Debounced events whose quiet period has passed.
    pub fn due(&mut self, now: EpochMs) -> Vec<Release> {
        let mut out = Vec::new();
        for (topic, t) in self.topics.iter_mut() {
            if matches!(&t.pending, Some((_, due)) if *due <= now) {
                let (payload, _) = t.pending.take().expect("checked");
                t.counts.pending -= 1;
                t.counts.published += 1;
                out.push((topic.clone(), payload));
            }
        }
        out
    }

    pub fn next_due(&self) -> Option<EpochMs> {
        self.topics.values().filter_map(|t| t.pending.as_ref().map(|p| p.1)).min()
    }

    pub fn counts(&self, topic: &str) -> ShaperCounts {
        self.topics.get(topic).map(|t| t.counts).unwrap_or_default()
    }

    pub fn all_counts(&self) -> BTreeMap<String, ShaperCounts> {
        self.topics.iter().map(|(k, v)| (k.clone(), v.counts)).collect()
    }
}

/// Publishes application events on the bus with optional delay, debounce or
/// throttle.
#[derive(Debug)]
pub struct EventServer {
    clock: SharedClock,
    bus: Bus,
    scheduler: Option<Scheduler>,
    shaper: Arc<Mutex<Shaper>>,
    seq: Mutex<u64>,
}

impl EventServer {
    pub fn new(clock: SharedClock, bus: Bus, scheduler: Option<Scheduler>) -> Self {
        Self {
            clock,
            bus,
            scheduler,
            shaper: Arc::new(Mutex::new(Shaper::default())),
            seq: Mutex::new(0),
        }
    }

    pub fn counts(&self, topic: &str) -> ShaperCounts {
        self.shaper.lock().counts(topic)
    }

    pub fn all_counts(&self) -> BTreeMap<String, ShaperCounts> {
        self.shaper.lock().all_counts()
    }

    pub fn emit(&self, topic: &str, payload: Vec<u8>, opts: EmitOpts) -> Result<(), ServerError> {
        let shaped = opts.debounce_ms.is_some() as u8 + opts.throttle_ms.is_some() as u8;
        if shaped > 1 || (shaped == 1 && opts.delay_ms.is_some()) {
            return Err(ServerError::ConflictingOpts);
        }
        let now = self.clock.now_ms();
        if let Some(ms) = opts.debounce_ms {
            let due = self.shaper.lock().debounce(topic, payload, ms, now);
            self.at(due, {
                let shaper = self.shaper.clone();
                let bus = self.bus.clone();
                let clock = self.clock.clone();
                move || {
                    for (t, p) in shaper.lock().due(clock.now_ms()) {
                        let _ = bus.publish(&t, p);
                    }
                }
            });
            return Ok(());
        }
        if let Some(ms) = opts.throttle_ms {
            if let Some((t, p)) = self.shaper.lock().throttle(topic, payload, ms, now) {
                self.publish(&t, p)?;
            }
            return Ok(());
        }
        self.shaper.lock().plain(topic);
        match opts.delay_ms {
            Some(ms) if ms > 0 => {
                let bus = self.bus.clone();
                let topic = topic.to_string();
                self.at(now + ms, move || {
                    let _ = bus.publish(&topic, payload.clone());
                });
                Ok(())
            }
            _ => self.publish(topic, payload),
        }
    }

    fn publish(&self, topic: &str, payload: Vec<u8>) -> Result<(), ServerError> {
        self.bus
            .publish(topic, payload)
            .map(|_| ())
            .map_err(|e| ServerError::InvalidArgument(e.to_string()))
    }

    /// Runs `f` once at `at` on the scheduler, or on a timer thread when
    /// there is no scheduler.
    fn at<F: Fn() + Send + 'static>(&self, at: EpochMs, f: F) {
        let id = {
            let mut s = self.seq.lock();
            *s += 1;
            format!("event-{}", *s)
        };
        match &self.scheduler {
            Some(sched) => {
                let spec = TaskSpec::new(
                    id,
                    5,
                    Box::new(move |_| {
                        f();
                        Step::Done
                    }),
                )
                .trigger(Trigger::At(at));
                let _ = sched.submit(spec);
            }
            None => {
                let clock = self.clock.clone();
                std::thread::spawn(move || {
                    while clock.now_ms() < at {
                        std::thread::sleep(std::time::Duration::from_millis((at - clock.now_ms()).min(10)));
                    }
                    f();
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[test]
    fn debounce_burst_releases_last() {
        let mut s = Shaper::default();
        for i in 0..5u64 {
            s.debounce("t", vec![i as u8], 50, i * 10);
        }
        assert!(s.due(89).is_empty());
        assert_eq!(s.due(90), vec![("t".to_string(), vec![4])]);
        let c = s.counts("t");
        assert_eq!((c.emitted, c.published, c.dropped, c.pending), (5, 1, 4, 0));
    }

    #[test]
    fn throttle_leading_edge() {
        let mut s = Shaper::default();
        let published: Vec<u64> = (0..5u64)
            .filter(|i| s.throttle("t", vec![], 30, i * 10).is_some())
            .map(|i| i * 10)
            .collect();
        assert_eq!(published, vec![0, 30]);
        assert_eq!(s.counts("t").dropped, 3);
    }

    #[test]
    fn conflicting_opts() {
        let c = ManualClock::new(0);
        let ev = EventServer::new(c.clone(), Bus::new("t", c), None);
        let both = EmitOpts {
            debounce_ms: Some(1),
            throttle_ms: Some(1),
            delay_ms: None,
        };
        assert_eq!(ev.emit("x", vec![], both), Err(ServerError::ConflictingOpts));
    }

    #[test]
    fn plain_emit_reaches_subscriber() {
        let c = ManualClock::new(0);
        let bus = Bus::new("t", c.clone());
        let sub = bus.subscribe("news", "s1");
        let ev = EventServer::new(c, bus, None);
        ev.emit("news", b"hi".to_vec(), EmitOpts::default()).unwrap();
        assert_eq!(sub.try_recv().unwrap().body, b"hi");
    }
}
