use std::collections::{BTreeMap, HashMap};

pub const DEFAULT_BTB_CAPACITY: usize = 1024;

/// Branch target buffer keyed by the full branch-site identifier.
///
/// Replacement is LRU over training order; lookups do not refresh recency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchTargetBuffer {
    capacity: usize,
    clock: u64,
    entries: HashMap<u64, (u64, u64)>,
    by_age: BTreeMap<u64, u64>,
}

impl BranchTargetBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "BTB capacity must be positive");
        BranchTargetBuffer {
            capacity,
            clock: 0,
            entries: HashMap::new(),
            by_age: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn train(&mut self, site: u64, target: u64) {
        self.clock += 1;
        if let Some((_, stamp)) = self.entries.remove(&site) {
            self.by_age.remove(&stamp);
        } else if self.entries.len() == self.capacity {
            let (_, victim) = self.by_age.pop_first().expect("full BTB has entries");
            self.entries.remove(&victim);
        }
        self.entries.insert(site, (target, self.clock));
        self.by_age.insert(self.clock, site);
    }

    pub fn predict(&self, site: u64) -> Option<u64> {
        self.entries.get(&site).map(|&(target, _)| target)
    }

    /// Entries oldest first, for digests.
    pub fn canonical_text(&self) -> String {
        let mut out = format!("cap={};", self.capacity);
        for site in self.by_age.values() {
            out.push_str(&format!("{site:#x}->{:#x};", self.entries[site].0));
        }
        out
    }
}

impl Default for BranchTargetBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_BTB_CAPACITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference map-with-LRU: a vector ordered oldest to newest.
    struct Oracle {
        cap: usize,
        items: Vec<(u64, u64)>,
    }

    impl Oracle {
        fn train(&mut self, s: u64, t: u64) {
            if let Some(i) = self.items.iter().position(|e| e.0 == s) {
                self.items.remove(i);
            } else if self.items.len() == self.cap {
                self.items.remove(0);
            }
            self.items.push((s, t));
        }

        fn predict(&self, s: u64) -> Option<u64> {
            self.items.iter().find(|e| e.0 == s).map(|e| e.1)
        }
    }

    #[test]
    fn train_and_predict() {
        let mut b = BranchTargetBuffer::new(4);
        assert_eq!(b.predict(1), None);
        b.train(1, 10);
        assert_eq!(b.predict(1), Some(10));
        b.train(1, 20);
        assert_eq!(b.predict(1), Some(20));
    }

    #[test]
    fn lru_eviction() {
        let mut b = BranchTargetBuffer::new(2);
        b.train(1, 10);
        b.train(2, 20);
        b.train(3, 30);
        assert_eq!(b.predict(1), None);
        assert_eq!(b.predict(2), Some(20));
        assert_eq!(b.predict(3), Some(30));
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn predict_does_not_refresh() {
        let mut b = BranchTargetBuffer::new(2);
        b.train(1, 10);
        b.train(2, 20);
        assert_eq!(b.predict(1), Some(10));
        b.train(3, 30);
        assert_eq!(b.predict(1), None);
    }

    #[test]
    fn matches_oracle_over_long_sequence() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = BranchTargetBuffer::new(16);
        let mut o = Oracle { cap: 16, items: Vec::new() };
        for _ in 0..10_000 {
            let s = rng.gen_range(0..40u64);
            if rng.gen_bool(0.5) {
                let t = rng.gen_range(0..1000u64);
                b.train(s, t);
                o.train(s, t);
            } else {
                assert_eq!(b.predict(s), o.predict(s));
            }
        }
    }

    proptest! {
        #[test]
        fn behaves_like_reference(cap in 1usize..8, ops in prop::collection::vec((any::<bool>(), 0u64..12, 0u64..5), 0..400)) {
            let mut b = BranchTargetBuffer::new(cap);
            let mut o = Oracle { cap, items: Vec::new() };
            for (train, s, t) in ops {
                if train {
                    b.train(s, t);
                    o.train(s, t);
                }
                prop_assert_eq!(b.predict(s), o.predict(s));
                prop_assert!(b.len() <= cap);
            }
        }
    }
}
