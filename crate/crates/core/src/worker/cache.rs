use std::collections::{BTreeMap, VecDeque};

use crate::pipeline::Batch;
use crate::wire::CacheStats;

/// Sliding window of the most recent `capacity` batches with one read
/// pointer per client.
///
/// The window holds sequence numbers `[floor, next_seq)`. Pointers that fall
/// below the floor are clamped up to it, so a slow reader skips evicted
/// batches instead of re-reading them.
#[derive(Debug, Clone)]
pub struct SlidingWindowCache {
    capacity: usize,
    window: VecDeque<Batch>,
    next_seq: u64,
    pointers: BTreeMap<u64, u64>,
    evictions: u64,
    produced: u64,
}

/// Outcome of [`SlidingWindowCache::read`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheRead {
    Hit(Batch),
    /// The client is at the front; a new batch must be produced.
    AtFront,
}

impl SlidingWindowCache {
    /// Panics if `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            window: VecDeque::with_capacity(capacity),
            next_seq: 0,
            pointers: BTreeMap::new(),
            evictions: 0,
            produced: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn floor(&self) -> u64 {
        self.next_seq - self.window.len() as u64
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Adds a client at the window floor. No-op for known clients.
    pub fn register(&mut self, client: u64) {
        let floor = self.floor();
        self.pointers.entry(client).or_insert(floor);
    }

    pub fn pointer(&self, client: u64) -> Option<u64> {
        self.pointers.get(&client).copied()
    }

    pub fn remove(&mut self, client: u64) {
        self.pointers.remove(&client);
    }

    /// Whether any client is waiting at the front.
    pub fn has_demand(&self, lookahead: u64) -> bool {
        self.pointers
            .values()
            .any(|&p| p + lookahead > self.next_seq)
    }

    /// Appends a freshly produced batch, evicting the oldest one when full.
    pub fn push(&mut self, batch: Batch) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
            self.evictions += 1;
        }
        self.window.push_back(batch);
        self.next_seq += 1;
        self.produced += 1;
        let floor = self.floor();
        for p in self.pointers.values_mut() {
            if *p < floor {
                *p = floor;
            }
        }
    }

    /// Returns the batch at the client's pointer and advances it.
    pub fn read(&mut self, client: u64) -> CacheRead {
        self.register(client);
        let floor = self.floor();
        let p = self.pointers.get_mut(&client).expect("registered above");
        if *p < floor {
            *p = floor;
        }
        if *p >= self.next_seq {
            return CacheRead::AtFront;
        }
        let batch = self.window[(*p - floor) as usize].clone();
        *p += 1;
        CacheRead::Hit(batch)
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            window_floor: self.floor(),
            next_seq: self.next_seq,
            pointers: self.pointers.iter().map(|(c, p)| (*c, *p)).collect(),
            evictions: self.evictions,
            produced: self.produced,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Element;

    fn b(i: u64) -> Batch {
        Batch::new(vec![Element::new(i, 1, vec![0])])
    }

    fn key(r: CacheRead) -> u64 {
        match r {
            CacheRead::Hit(b) => b.elements[0].key,
            CacheRead::AtFront => panic!("expected a hit"),
        }
    }

    #[test]
    fn read_advances_pointer() {
        let mut c = SlidingWindowCache::new(2);
        c.register(1);
        c.push(b(1));
        c.push(b(2));
        assert_eq!(key(c.read(1)), 1);
        assert_eq!(c.pointer(1), Some(1));
        assert_eq!(key(c.read(1)), 2);
        assert_eq!(c.read(1), CacheRead::AtFront);
    }

    #[test]
    fn slow_reader_is_clamped_past_evicted_batch() {
        let mut c = SlidingWindowCache::new(3);
        c.register(10);
        c.register(20);
        for i in 1..=2 {
            c.push(b(i));
            assert_eq!(key(c.read(10)), i);
            assert_eq!(key(c.read(20)), i);
        }
        // Batches 3..5 go to the fast job only.
        for i in 3..=5 {
            c.push(b(i));
            assert_eq!(key(c.read(10)), i);
        }
        // Window is [3,4,5]; the fast job is at the front, the slow one at 3.
        assert_eq!(c.read(10), CacheRead::AtFront);
        c.push(b(6));
        assert_eq!(key(c.read(10)), 6);
        assert_eq!(key(c.read(20)), 4);
    }

    #[test]
    fn new_clients_start_at_floor() {
        let mut c = SlidingWindowCache::new(2);
        for i in 0..5 {
            c.push(b(i));
        }
        c.register(7);
        assert_eq!(c.pointer(7), Some(3));
    }

    #[test]
    fn stats_count_evictions() {
        let mut c = SlidingWindowCache::new(4);
        assert_eq!(c.stats().produced, 0);
        assert_eq!(c.stats().evictions, 0);
        c.register(1);
        for i in 0..10 {
            assert_eq!(c.read(1), CacheRead::AtFront);
            c.push(b(i));
            assert_eq!(key(c.read(1)), i);
        }
        let s = c.stats();
        assert_eq!((s.produced, s.evictions), (10, 6));
        assert_eq!((s.window_floor, s.next_seq), (6, 10));
    }
}
