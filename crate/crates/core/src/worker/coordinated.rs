use std::collections::{BTreeMap, VecDeque};

use crate::pipeline::Batch;

#[derive(Debug, Clone)]
struct PreparedRound {
    batches: Vec<Batch>,
    fetched: Vec<bool>,
}

impl PreparedRound {
    fn open(&self) -> bool {
        self.fetched.iter().any(|f| !f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoundRead {
    Batch(Batch),
    Pending,
    EndOfJob,
    WrongWorker,
    BadConsumer,
    /// The round was prepared and has since been discarded.
    Expired,
}

/// Per-worker state for coordinated reads: worker `my_index` of `n` owns
/// rounds `r` with `r mod n = my_index` and serves `m` same-bucket batches
/// in each.
#[derive(Debug, Clone)]
pub struct RoundRobinState {
    n: u64,
    m: usize,
    my_index: u64,
    queues: BTreeMap<u32, VecDeque<Batch>>,
    /// Own-round count at which a bucket last became eligible.
    eligible_since: BTreeMap<u32, u64>,
    rounds: BTreeMap<u64, PreparedRound>,
    next_round: u64,
    prepared: u64,
    finished: bool,
    max_requested: Option<u64>,
    dropped_batches: u64,
    borrowed_batches: u64,
}

impl RoundRobinState {
    /// Panics unless `n > 0`, `m > 0` and `my_index < n`.
    pub fn new(n: u64, m: usize, my_index: u64) -> Self {
        assert!(n > 0 && m > 0 && my_index < n, "invalid round-robin shape");
        Self {
            n,
            m,
            my_index,
            queues: BTreeMap::new(),
            eligible_since: BTreeMap::new(),
            rounds: BTreeMap::new(),
            next_round: my_index,
            prepared: 0,
            finished: false,
            max_requested: None,
            dropped_batches: 0,
            borrowed_batches: 0,
        }
    }

    pub fn push(&mut self, batch: Batch) {
        let bucket = batch.bucket_id.unwrap_or(0);
        self.queues.entry(bucket).or_default().push_back(batch);
    }

    pub fn queued(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    /// Prepared rounds not yet fetched by every consumer.
    pub fn open_rounds(&self) -> usize {
        self.rounds.values().filter(|r| r.open()).count()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Leftover batches that could not fill a final round.
    pub fn dropped_batches(&self) -> u64 {
        self.dropped_batches
    }

    /// Batches moved into a higher bucket's final round.
    pub fn borrowed_batches(&self) -> u64 {
        self.borrowed_batches
    }

    pub fn prepared_rounds(&self) -> Vec<u64> {
        self.rounds.keys().copied().collect()
    }

    fn pick_bucket(&mut self) -> Option<u32> {
        let m = self.m;
        let eligible: Vec<u32> = self
            .queues
            .iter()
            .filter(|(_, q)| q.len() >= m)
            .map(|(b, _)| *b)
            .collect();
        self.eligible_since.retain(|b, _| eligible.contains(b));
        for b in &eligible {
            self.eligible_since.entry(*b).or_insert(self.prepared);
        }
        let aged = self
            .eligible_since
            .iter()
            .filter(|(_, since)| self.prepared - **since >= self.n)
            .min_by_key(|(b, since)| (**since, **b))
            .map(|(b, _)| *b);
        aged.or_else(|| {
            eligible
                .iter()
                .copied()
                .max_by_key(|b| (self.queues[b].len(), std::cmp::Reverse(*b)))
        })
    }

    fn install(&mut self, bucket: u32, mut batches: Vec<Batch>) {
        let padded = batches.iter().map(|b| b.padded_len).max().unwrap_or(0);
        let round = self.next_round;
        for b in &mut batches {
            b.bucket_id = Some(bucket);
            b.producer_round = Some(round);
            b.padded_len = padded;
            b.materialize_padding();
        }
        self.rounds.insert(
            round,
            PreparedRound {
                fetched: vec![false; batches.len()],
                batches,
            },
        );
        self.eligible_since.remove(&bucket);
        self.next_round += self.n;
        self.prepared += 1;
    }

    /// Prepares the next own round if some bucket holds `m` batches.
    pub fn try_prepare(&mut self) -> bool {
        if self.finished {
            return false;
        }
        let Some(bucket) = self.pick_bucket() else {
            return false;
        };
        let q = self.queues.get_mut(&bucket).expect("picked bucket exists");
        let batches: Vec<Batch> = q.drain(..self.m).collect();
        self.install(bucket, batches);
        true
    }

    /// End of data: prepares what it can, then fills short final rounds
    /// from the highest non-empty bucket downward. Fewer than `m`
    /// leftovers are dropped.
    pub fn finish(&mut self) {
        while self.try_prepare() {}
        while self.queued() >= self.m {
            let top = *self
                .queues
                .iter()
                .rev()
                .find(|(_, q)| !q.is_empty())
                .map(|(b, _)| b)
                .expect("queued() > 0");
            let mut batches = Vec::with_capacity(self.m);
            for (b, q) in self.queues.iter_mut().rev().filter(|(b, _)| **b <= top) {
                while batches.len() < self.m {
                    match q.pop_front() {
                        Some(batch) => {
                            if *b != top {
                                self.borrowed_batches += 1;
                            }
                            batches.push(batch);
                        }
                        None => break,
                    }
                }
            }
            self.install(top, batches);
        }
        self.dropped_batches += self.queued() as u64;
        self.queues.clear();
        self.finished = true;
    }

    pub fn get(&mut self, consumer: usize, round: u64) -> RoundRead {
        if round % self.n != self.my_index {
            return RoundRead::WrongWorker;
        }
        if consumer >= self.m {
            return RoundRead::BadConsumer;
        }
        if let Some(r) = self.rounds.get_mut(&round) {
            r.fetched[consumer] = true;
            let batch = r.batches[consumer].clone();
            self.max_requested = Some(self.max_requested.map_or(round, |m| m.max(round)));
            self.expire();
            return RoundRead::Batch(batch);
        }
        if round < self.next_round {
            RoundRead::Expired
        } else if self.finished {
            RoundRead::EndOfJob
        } else {
            RoundRead::Pending
        }
    }

    /// Drops fully fetched rounds more than two own rounds behind the newest
    /// request. A round some consumer has not read yet is always kept; the
    /// producer's `rounds_ahead` limit bounds how many of those exist.
    fn expire(&mut self) {
        if let Some(max) = self.max_requested {
            let horizon = 2 * self.n;
            self.rounds.retain(|r, p| p.open() || r + horizon > max);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Element;

    fn b(key: u64, len: u32, bucket: u32) -> Batch {
        Batch::new(vec![Element::new(key, len, vec![1; len as usize])]).with_bucket(bucket)
    }

    #[test]
    fn owns_only_its_rounds() {
        let mut s = RoundRobinState::new(2, 2, 1);
        assert_eq!(s.get(0, 4), RoundRead::WrongWorker);
        assert_eq!(s.get(2, 1), RoundRead::BadConsumer);
        assert_eq!(s.get(0, 1), RoundRead::Pending);
    }

    #[test]
    fn round_batches_share_a_bucket_and_reads_are_idempotent() {
        let mut s = RoundRobinState::new(2, 2, 0);
        s.push(b(1, 10, 0));
        s.push(b(2, 200, 1));
        assert!(!s.try_prepare());
        s.push(b(3, 300, 1));
        assert!(s.try_prepare());
        let first = s.get(0, 0);
        assert_eq!(s.get(0, 0), first);
        let RoundRead::Batch(x) = first else { panic!() };
        let RoundRead::Batch(y) = s.get(1, 0) else {
            panic!()
        };
        assert_eq!(x.bucket_id, Some(1));
        assert_eq!(y.bucket_id, Some(1));
        assert_eq!((x.producer_round, y.producer_round), (Some(0), Some(0)));
        assert_eq!(x.padded_len, 300);
        assert_eq!(y.padded_len, 300);
        assert_eq!(s.open_rounds(), 0);
    }

    #[test]
    fn busiest_bucket_first_with_aging() {
        let mut s = RoundRobinState::new(2, 1, 0);
        s.push(b(1, 10, 0));
        for k in 0..6 {
            s.push(b(10 + k, 200, 1));
        }
        let mut order = Vec::new();
        while s.try_prepare() {}
        for r in s.prepared_rounds() {
            let RoundRead::Batch(x) = s.get(0, r) else {
                panic!()
            };
            order.push(x.bucket_id.unwrap());
        }
        // Bucket 0 is eligible from the start and ages in after n rounds.
        assert_eq!(order, vec![1, 1, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn final_round_borrows_from_lower_bucket() {
        let mut s = RoundRobinState::new(1, 2, 0);
        s.push(b(1, 10, 0));
        s.push(b(2, 300, 1));
        s.push(b(3, 600, 2));
        s.finish();
        let RoundRead::Batch(x) = s.get(0, 0) else {
            panic!()
        };
        let RoundRead::Batch(y) = s.get(1, 0) else {
            panic!()
        };
        assert_eq!((x.bucket_id, y.bucket_id), (Some(2), Some(2)));
        assert_eq!(y.keys().collect::<Vec<_>>(), vec![2]);
        assert_eq!(x.padded_len, y.padded_len);
        assert_eq!(s.borrowed_batches(), 1);
        assert_eq!(s.dropped_batches(), 1);
        assert_eq!(s.get(0, 1), RoundRead::EndOfJob);
    }

    #[test]
    fn old_rounds_expire() {
        let mut s = RoundRobinState::new(1, 1, 0);
        for k in 0..5 {
            s.push(b(k, 1, 0));
            assert!(s.try_prepare());
        }
        for r in 0..5 {
            assert!(matches!(s.get(0, r), RoundRead::Batch(_)));
        }
        assert_eq!(s.get(0, 1), RoundRead::Expired);
        assert!(matches!(s.get(0, 3), RoundRead::Batch(_)));
    }
}
