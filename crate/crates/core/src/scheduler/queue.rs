use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Ready-queue key: higher priority first, then lower enqueue sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadyKey {
    pub priority: u8,
    pub seq: u64,
    pub task_id: String,
}

impl Ord for ReadyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for ReadyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct ReadyQueue {
    heap: BinaryHeap<ReadyKey>,
}

impl ReadyQueue {
    pub fn push(&mut self, priority: u8, seq: u64, task_id: String) {
        self.heap.push(ReadyKey {
            priority,
            seq,
            task_id,
        });
    }

    pub fn pop(&mut self) -> Option<ReadyKey> {
        self.heap.pop()
    }

    /// Upper bound on queued entries; cancelled tasks are removed lazily.
    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn priority_then_fifo() {
        let mut q = ReadyQueue::default();
        q.push(1, 0, "low".into());
        q.push(5, 1, "a".into());
        q.push(3, 2, "mid".into());
        q.push(5, 3, "b".into());
        let order: Vec<String> = std::iter::from_fn(|| q.pop().map(|k| k.task_id)).collect();
        assert_eq!(order, ["a", "b", "mid", "low"]);
    }
}
