use std::collections::VecDeque;

use serde::Serialize;

/// Bounded FIFO connecting two simulated processes.
#[derive(Debug)]
pub struct FifoChannel<M> {
    name: String,
    capacity: usize,
    queue: VecDeque<M>,
    stats: ChannelStats,
}

/// Occupancy and stall statistics of one channel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub name: String,
    pub capacity: usize,
    pub pushed: u64,
    pub popped: u64,
    pub producer_stalls: u64,
    pub consumer_stalls: u64,
    pub observed_full: bool,
    pub max_occupancy: usize,
}

impl<M> FifoChannel<M> {
    pub fn new(name: impl Into<String>, capacity: usize) -> Self {
        let name = name.into();
        assert!(capacity >= 1, "channel {name} needs capacity >= 1");
        Self {
            stats: ChannelStats {
                name: name.clone(),
                capacity,
                ..Default::default()
            },
            name,
            capacity,
            queue: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.queue.len() >= self.capacity
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    pub fn push(&mut self, msg: M) -> Result<(), M> {
        if self.is_full() {
            self.stats.observed_full = true;
            return Err(msg);
        }
        self.queue.push_back(msg);
        self.stats.pushed += 1;
        self.stats.max_occupancy = self.stats.max_occupancy.max(self.queue.len());
        if self.is_full() {
            self.stats.observed_full = true;
        }
        Ok(())
    }

    pub fn pop(&mut self) -> Option<M> {
        let msg = self.queue.pop_front()?;
        self.stats.popped += 1;
        Some(msg)
    }

    pub fn peek(&self) -> Option<&M> {
        self.queue.front()
    }

    pub(crate) fn mark_full_seen(&mut self) {
        self.stats.observed_full = true;
    }

    pub(crate) fn add_producer_stall(&mut self) {
        self.stats.producer_stalls += 1;
    }

    pub(crate) fn add_consumer_stall(&mut self) {
        self.stats.consumer_stalls += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_and_bounds() {
        let mut ch = FifoChannel::new("q", 2);
        assert!(ch.push(1).is_ok());
        assert!(ch.push(2).is_ok());
        assert_eq!(ch.push(3), Err(3));
        assert!(ch.stats().observed_full);
        assert_eq!(ch.pop(), Some(1));
        assert!(ch.push(3).is_ok());
        assert_eq!(ch.pop(), Some(2));
        assert_eq!(ch.pop(), Some(3));
        assert_eq!(ch.pop(), None);
        assert_eq!(ch.stats().max_occupancy, 2);
    }
}
