use std::collections::HashMap;
use std::hash::Hash;

const NIL: usize = usize::MAX;

/// Least-recently-used map bounded by a byte budget.
///
/// Entries are evicted before an insert would push the total over budget; an entry
/// larger than the whole budget is refused. Hits only relink slab entries, so `get`
/// never allocates.
#[derive(Debug)]
pub struct ByteLru<K, V> {
    map: HashMap<K, usize>,
    slab: Vec<Entry<K, V>>,
    free: Vec<usize>,
    head: usize,
    tail: usize,
    bytes: usize,
    budget: usize,
}

#[derive(Debug)]
struct Entry<K, V> {
    item: Option<(K, V)>,
    size: usize,
    prev: usize,
    next: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub struct Inserted<K> {
    pub stored: bool,
    pub evicted: Vec<K>,
}

impl<K: Hash + Eq + Clone, V> ByteLru<K, V> {
    pub fn new(budget: usize) -> Self {
        ByteLru {
            map: HashMap::new(),
            slab: Vec::new(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
            bytes: 0,
            budget,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.slab[i].prev, self.slab[i].next);
        if prev == NIL {
            self.head = next;
        } else {
            self.slab[prev].next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.slab[next].prev = prev;
        }
    }

    fn push_front(&mut self, i: usize) {
        self.slab[i].prev = NIL;
        self.slab[i].next = self.head;
        if self.head != NIL {
            self.slab[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn remove_at(&mut self, i: usize) -> (K, V) {
        self.unlink(i);
        let item = self.slab[i].item.take().expect("linked entries are occupied");
        self.bytes -= self.slab[i].size;
        self.map.remove(&item.0);
        self.free.push(i);
        item
    }

    pub fn get(&mut self, key: &K) -> Option<&V> {
        let i = *self.map.get(key)?;
        if self.head != i {
            self.unlink(i);
            self.push_front(i);
        }
        self.slab[i].item.as_ref().map(|(_, v)| v)
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.contains_key(key)
    }

    /// Keys from most to least recently used.
    pub fn keys_by_recency(&self) -> Vec<K> {
        let mut out = Vec::with_capacity(self.len());
        let mut i = self.head;
        while i != NIL {
            out.push(self.slab[i].item.as_ref().expect("occupied").0.clone());
            i = self.slab[i].next;
        }
        out
    }

    pub fn insert(&mut self, key: K, value: V, size: usize) -> Inserted<K> {
        if let Some(&i) = self.map.get(&key) {
            self.remove_at(i);
        }
        if size > self.budget {
            return Inserted {
                stored: false,
                evicted: Vec::new(),
            };
        }
        let mut evicted = Vec::new();
        while self.bytes + size > self.budget {
            let (k, _) = self.remove_at(self.tail);
            evicted.push(k);
        }
        let entry = Entry {
            item: Some((key.clone(), value)),
            size,
            prev: NIL,
            next: NIL,
        };
        let i = match self.free.pop() {
            Some(i) => {
                self.slab[i] = entry;
                i
            }
            None => {
                self.slab.push(entry);
                self.slab.len() - 1
            }
        };
        self.push_front(i);
        self.map.insert(key, i);
        self.bytes += size;
        Inserted { stored: true, evicted }
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.slab.clear();
        self.free.clear();
        self.head = NIL;
        self.tail = NIL;
        self.bytes = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evicts_least_recent_first() {
        let mut lru = ByteLru::new(10);
        lru.insert("a", 1, 4);
        lru.insert("b", 2, 4);
        assert_eq!(lru.get(&"a"), Some(&1));
        let out = lru.insert("c", 3, 4);
        assert_eq!(out.evicted, vec!["b"]);
        assert!(lru.contains(&"a") && lru.contains(&"c"));
        assert_eq!(lru.bytes(), 8);
        assert_eq!(lru.keys_by_recency(), vec!["c", "a"]);
    }

    #[test]
    fn oversized_entries_are_refused() {
        let mut lru = ByteLru::new(3);
        lru.insert(1, (), 2);
        let out = lru.insert(2, (), 4);
        assert!(!out.stored);
        assert_eq!(lru.len(), 1);
    }

    #[test]
    fn reinsert_replaces_size() {
        let mut lru = ByteLru::new(10);
        lru.insert(1, "x", 6);
        lru.insert(1, "y", 2);
        assert_eq!(lru.bytes(), 2);
        assert_eq!(lru.get(&1), Some(&"y"));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u8, usize),
        Get(u8),
    }

    /// Straightforward model: a vector ordered from least to most recent.
    struct Model {
        order: Vec<(u8, usize)>,
        budget: usize,
    }

    impl Model {
        fn get(&mut self, k: u8) -> bool {
            match self.order.iter().position(|e| e.0 == k) {
                Some(p) => {
                    let e = self.order.remove(p);
                    self.order.push(e);
                    true
                }
                None => false,
            }
        }
        fn insert(&mut self, k: u8, size: usize) -> (bool, Vec<u8>) {
            self.order.retain(|e| e.0 != k);
            if size > self.budget {
                return (false, vec![]);
            }
            let mut ev = vec![];
            while self.order.iter().map(|e| e.1).sum::<usize>() + size > self.budget {
                ev.push(self.order.remove(0).0);
            }
            self.order.push((k, size));
            (true, ev)
        }
    }

    proptest! {
        #[test]
        fn matches_reference_model(ops in proptest::collection::vec(
            prop_oneof![
                (0u8..12, 1usize..40).prop_map(|(k, s)| Op::Insert(k, s)),
                (0u8..12).prop_map(Op::Get),
            ],
            1..200,
        )) {
            let mut lru = ByteLru::new(64);
            let mut model = Model { order: vec![], budget: 64 };
            for op in ops {
                match op {
                    Op::Insert(k, s) => {
                        let got = lru.insert(k, k, s);
                        let want = model.insert(k, s);
                        prop_assert_eq!((got.stored, got.evicted), want);
                    }
                    Op::Get(k) => {
                        prop_assert_eq!(lru.get(&k).is_some(), model.get(k));
                    }
                }
                prop_assert!(lru.bytes() <= 64);
                let want: Vec<u8> = model.order.iter().rev().map(|e| e.0).collect();
                prop_assert_eq!(lru.keys_by_recency(), want);
            }
        }
    }
}
