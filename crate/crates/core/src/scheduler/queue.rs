use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    /// Head stage of a newly submitted instance.
    Low,
    /// Continuation of an instance that has already started.
    High,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueuePolicy {
    /// Continuations strictly before heads.
    #[default]
    TwoQueue,
    /// One queue in arrival order; for comparison.
    Fifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueFull;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub high_depth: usize,
    pub low_depth: usize,
    pub high_dequeued: u64,
    pub low_dequeued: u64,
    pub rejected: u64,
}

/// The low/high event queue pair. Only head admissions are bounded, so a started
/// instance can always make progress.
#[derive(Debug)]
pub struct EventQueues<T> {
    high: VecDeque<T>,
    low: VecDeque<(T, Priority)>,
    policy: QueuePolicy,
    bound: usize,
    stats: QueueStats,
}

impl<T> EventQueues<T> {
    pub fn new(policy: QueuePolicy, bound: usize) -> Self {
        EventQueues {
            high: VecDeque::new(),
            low: VecDeque::new(),
            policy,
            bound,
            stats: QueueStats::default(),
        }
    }

    pub fn policy(&self) -> QueuePolicy {
        self.policy
    }

    pub fn push(&mut self, item: T, priority: Priority) -> Result<(), QueueFull> {
        match (self.policy, priority) {
            (QueuePolicy::TwoQueue, Priority::High) => self.high.push_back(item),
            (_, Priority::Low) if self.low_heads() >= self.bound => {
                self.stats.rejected += 1;
                return Err(QueueFull);
            }
            (_, p) => self.low.push_back((item, p)),
        }
        Ok(())
    }

    /// Pushes many heads at once, or none if they do not all fit. A group larger than
    /// the bound is still admitted into an empty queue so it cannot starve.
    pub fn push_heads(&mut self, items: impl ExactSizeIterator<Item = T>) -> Result<(), QueueFull> {
        let queued = self.low_heads();
        if queued > 0 && queued + items.len() > self.bound {
            self.stats.rejected += 1;
            return Err(QueueFull);
        }
        self.low.extend(items.map(|i| (i, Priority::Low)));
        Ok(())
    }

    fn low_heads(&self) -> usize {
        match self.policy {
            QueuePolicy::TwoQueue => self.low.len(),
            QueuePolicy::Fifo => self.low.iter().filter(|(_, p)| *p == Priority::Low).count(),
        }
    }

    pub fn pop(&mut self) -> Option<(T, Priority)> {
        let got = match self.high.pop_front() {
            Some(t) => Some((t, Priority::High)),
            None => self.low.pop_front(),
        };
        match got {
            Some((_, Priority::High)) => self.stats.high_dequeued += 1,
            Some((_, Priority::Low)) => self.stats.low_dequeued += 1,
            None => {}
        }
        got
    }

    pub fn has_high(&self) -> bool {
        !self.high.is_empty()
            || (self.policy == QueuePolicy::Fifo && self.low.iter().any(|(_, p)| *p == Priority::High))
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.high.drain(..).chain(self.low.drain(..).map(|(t, _)| t))
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats {
            high_depth: self.high.len(),
            low_depth: self.low.len(),
            ..self.stats
        }
    }
}

/// Dependency bookkeeping for one instance: which stages are done and which may run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceState {
    deps: Vec<u64>,
    pending: Vec<u32>,
    completed: u64,
}

impl InstanceState {
    /// `deps[i]` has bit `d` set when stage `d` precedes stage `i`.
    pub fn new(deps: Vec<u64>) -> Self {
        let pending = deps.iter().map(|m| m.count_ones()).collect();
        InstanceState {
            deps,
            pending,
            completed: 0,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.deps.iter().enumerate().filter(|(_, m)| **m == 0).map(|(i, _)| i)
    }

    pub fn is_ready(&self, stage: usize) -> bool {
        self.completed & self.deps[stage] == self.deps[stage]
    }

    /// Marks `stage` complete and returns the stages this made ready.
    pub fn complete(&mut self, stage: usize) -> Vec<usize> {
        assert!(self.is_ready(stage), "stage {stage} completed before its dependencies");
        assert!(self.completed & (1 << stage) == 0, "stage {stage} completed twice");
        self.completed |= 1 << stage;
        let mut ready = Vec::new();
        for (i, m) in self.deps.iter().enumerate() {
            if m & (1 << stage) != 0 {
                self.pending[i] -= 1;
                if self.pending[i] == 0 {
                    ready.push(i);
                }
            }
        }
        ready
    }

    pub fn is_done(&self) -> bool {
        self.completed.count_ones() as usize == self.deps.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn high_before_low() {
        let mut q = EventQueues::new(QueuePolicy::TwoQueue, 8);
        q.push(1, Priority::Low).unwrap();
        q.push(2, Priority::High).unwrap();
        assert_eq!(q.pop(), Some((2, Priority::High)));
        assert_eq!(q.pop(), Some((1, Priority::Low)));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn fifo_keeps_arrival_order() {
        let mut q = EventQueues::new(QueuePolicy::Fifo, 8);
        q.push(1, Priority::Low).unwrap();
        q.push(2, Priority::High).unwrap();
        assert_eq!(q.pop().map(|x| x.0), Some(1));
    }

    #[test]
    fn bound_applies_to_heads_only() {
        let mut q = EventQueues::new(QueuePolicy::TwoQueue, 1);
        q.push(1, Priority::Low).unwrap();
        assert_eq!(q.push(2, Priority::Low), Err(QueueFull));
        q.push(3, Priority::High).unwrap();
        assert_eq!(q.stats().rejected, 1);
    }

    #[test]
    fn oversized_head_group_enters_empty_queue() {
        let mut q = EventQueues::new(QueuePolicy::TwoQueue, 2);
        q.push_heads([1, 2, 3].into_iter()).unwrap();
        assert_eq!(q.push_heads([4].into_iter()), Err(QueueFull));
        while q.pop().is_some() {}
        q.push_heads([5].into_iter()).unwrap();
    }

    #[test]
    fn two_stage_trace() {
        let mut s = InstanceState::new(vec![0, 0b1]);
        assert_eq!(s.heads().collect::<Vec<_>>(), vec![0]);
        assert!(!s.is_ready(1));
        assert_eq!(s.complete(0), vec![1]);
        assert_eq!(s.complete(1), Vec::<usize>::new());
        assert!(s.is_done());
    }

    proptest! {
        #[test]
        fn high_is_dequeued_whenever_present(ops in proptest::collection::vec(0u8..3, 1..200)) {
            let mut q = EventQueues::new(QueuePolicy::TwoQueue, 1000);
            for op in ops {
                match op {
                    0 => { let _ = q.push((), Priority::Low); }
                    1 => { q.push((), Priority::High).unwrap(); }
                    _ => {
                        let had_high = q.has_high();
                        if let Some((_, p)) = q.pop() {
                            prop_assert!(!had_high || p == Priority::High);
                        }
                    }
                }
            }
        }
    }
}
