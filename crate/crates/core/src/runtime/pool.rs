use crate::ops::DataVector;

const MIN_CLASS_SHIFT: u32 = 6;

/// Index of the smallest power-of-two class (from 64 elements) holding `cap`.
pub fn class_of(cap: usize) -> usize {
    (cap.max(1 << MIN_CLASS_SHIFT).next_power_of_two().trailing_zeros() - MIN_CLASS_SHIFT) as usize
}

pub fn class_size(class: usize) -> usize {
    1 << (class as u32 + MIN_CLASS_SHIFT)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct PoolStats {
    /// Fresh vectors allocated, whether or not they were later pooled.
    pub growth: u64,
    pub acquired: u64,
    pub released: u64,
    pub outstanding: usize,
    pub high_water: usize,
    pub pooled: usize,
}

/// Per-worker free lists of vectors, bucketed by power-of-two capacity class.
#[derive(Debug)]
pub struct VectorPool {
    classes: Vec<Vec<DataVector>>,
    enabled: bool,
    stats: PoolStats,
}

impl Default for VectorPool {
    fn default() -> Self {
        Self::new(true)
    }
}

impl VectorPool {
    /// With `enabled` false every acquire allocates and every release frees.
    pub fn new(enabled: bool) -> Self {
        VectorPool {
            classes: Vec::new(),
            enabled,
            stats: PoolStats::default(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn acquire(&mut self, cap: usize) -> DataVector {
        let class = class_of(cap);
        self.stats.acquired += 1;
        self.stats.outstanding += 1;
        self.stats.high_water = self.stats.high_water.max(self.stats.outstanding);
        if self.enabled {
            if let Some(v) = self.classes.get_mut(class).and_then(Vec::pop) {
                self.stats.pooled -= 1;
                return v;
            }
        }
        self.stats.growth += 1;
        DataVector::with_capacity(if self.enabled { class_size(class) } else { cap })
    }

    pub fn release(&mut self, mut v: DataVector) {
        self.stats.released += 1;
        self.stats.outstanding = self.stats.outstanding.saturating_sub(1);
        if !self.enabled {
            return;
        }
        let cap = v.capacity();
        if cap < class_size(0) {
            return;
        }
        // Largest class the vector fully covers.
        let class = (usize::BITS - 1 - cap.leading_zeros() - MIN_CLASS_SHIFT) as usize;
        v.clear();
        if self.classes.len() <= class {
            self.classes.resize_with(class + 1, Vec::new);
        }
        self.classes[class].push(v);
        self.stats.pooled += 1;
    }

    /// Pre-fills `count` vectors of capacity `cap`.
    pub fn reserve(&mut self, cap: usize, count: usize) {
        let vs: Vec<DataVector> = (0..count).map(|_| self.acquire(cap)).collect();
        for v in vs {
            self.release(v);
        }
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }

    pub fn pooled_bytes(&self) -> usize {
        self.classes.iter().flatten().map(|v| v.capacity() * (8 + 4)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classes() {
        assert_eq!(class_of(1), 0);
        assert_eq!(class_of(64), 0);
        assert_eq!(class_of(65), 1);
        assert_eq!(class_of(128), 1);
        assert_eq!(class_size(2), 256);
    }

    #[test]
    fn reuse_without_growth() {
        let mut p = VectorPool::new(true);
        let v = p.acquire(100);
        assert!(v.capacity() >= 100);
        p.release(v);
        let before = p.stats().growth;
        let v = p.acquire(120);
        assert_eq!(p.stats().growth, before);
        p.release(v);
    }

    #[test]
    fn disabled_always_allocates() {
        let mut p = VectorPool::new(false);
        for _ in 0..3 {
            let v = p.acquire(10);
            p.release(v);
        }
        assert_eq!(p.stats().growth, 3);
    }

    proptest! {
        #[test]
        fn conservation(ops in proptest::collection::vec((1usize..5000, any::<bool>()), 1..200)) {
            let mut p = VectorPool::new(true);
            let mut held = Vec::new();
            for (cap, release) in ops {
                if release && !held.is_empty() {
                    p.release(held.pop().unwrap());
                } else {
                    let v = p.acquire(cap);
                    prop_assert!(v.capacity() >= cap);
                    held.push(v);
                }
            }
            let n = held.len();
            prop_assert_eq!(p.stats().outstanding, n);
            for v in held { p.release(v); }
            let s = p.stats();
            prop_assert_eq!(s.acquired, s.released);
            prop_assert_eq!(s.outstanding, 0);
        }
    }
}
