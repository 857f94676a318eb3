use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

/// Bounded FIFO that drops its oldest entry on overflow.
#[derive(Debug)]
pub struct Ring<T> {
    buf: Mutex<VecDeque<(u64, T)>>,
    capacity: usize,
    dropped: AtomicU64,
}

impl<T: Clone> Ring<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        Self {
            buf: Mutex::new(VecDeque::with_capacity(capacity.min(4096))),
            capacity,
            dropped: AtomicU64::new(0),
        }
    }

    /// Appends a record tagged with a monitor-wide sequence number.
    pub fn push(&self, seq: u64, item: T) {
        let mut buf = self.buf.lock();
        if buf.len() == self.capacity {
            buf.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        buf.push_back((seq, item));
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.buf.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Clones the entries matching `pred`, oldest first.
    pub fn filter<F: Fn(&T) -> bool>(&self, pred: F) -> Vec<(u64, T)> {
        self.buf
            .lock()
            .iter()
            .filter(|(_, t)| pred(t))
            .cloned()
            .collect()
    }

    /// The last `n` entries matching `pred`, oldest first.
    pub fn last_n<F: Fn(&T) -> bool>(&self, n: usize, pred: F) -> Vec<T> {
        let buf = self.buf.lock();
        let mut out: Vec<T> = buf
            .iter()
            .rev()
            .filter(|(_, t)| pred(t))
            .take(n)
            .map(|(_, t)| t.clone())
            .collect();
        out.reverse();
        out
    }

    /// The first `n` entries matching `pred`.
    pub fn first_n<F: Fn(&T) -> bool>(&self, n: usize, pred: F) -> Vec<T> {
        self.buf
            .lock()
            .iter()
            .filter(|(_, t)| pred(t))
            .take(n)
            .map(|(_, t)| t.clone())
            .collect()
    }
}
