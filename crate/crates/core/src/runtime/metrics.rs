use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Serialize;

const SUB: usize = 16;
const OCTAVES: usize = 40;

/// Log-linear latency histogram over nanoseconds: 16 sub-buckets per power of two,
/// so quantiles are within ~6% of the true value. Lock- and allocation-free to record.
pub struct LatencyHistogram {
    buckets: Box<[AtomicU64]>,
    count: AtomicU64,
    sum_ns: AtomicU64,
    max_ns: AtomicU64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            buckets: (0..SUB * OCTAVES).map(|_| AtomicU64::new(0)).collect(),
            count: AtomicU64::new(0),
            sum_ns: AtomicU64::new(0),
            max_ns: AtomicU64::new(0),
        }
    }
}

impl std::fmt::Debug for LatencyHistogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatencyHistogram")
            .field("count", &self.count())
            .finish()
    }
}

fn bucket_of(ns: u64) -> usize {
    if ns < SUB as u64 {
        return ns as usize;
    }
    let octave = 63 - ns.leading_zeros() as usize; // >= 4
    let sub = ((ns >> (octave - 4)) as usize) & (SUB - 1);
    ((octave - 3) * SUB + sub).min(SUB * OCTAVES - 1)
}

/// Upper edge of a bucket, in nanoseconds.
fn bucket_upper(b: usize) -> u64 {
    if b < SUB {
        return b as u64;
    }
    let octave = b / SUB + 3;
    let sub = (b % SUB) as u64;
    ((SUB as u64 + sub + 1) << (octave - 4)) - 1
}

impl LatencyHistogram {
    pub fn record(&self, d: Duration) {
        let ns = d.as_nanos().min(u64::MAX as u128) as u64;
        self.buckets[bucket_of(ns)].fetch_add(1, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
        self.sum_ns.fetch_add(ns, Ordering::Relaxed);
        self.max_ns.fetch_max(ns, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    /// Approximate quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, q: f64) -> Duration {
        let n = self.count();
        if n == 0 {
            return Duration::ZERO;
        }
        let rank = ((q.clamp(0.0, 1.0) * n as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (b, c) in self.buckets.iter().enumerate() {
            seen += c.load(Ordering::Relaxed);
            if seen >= rank {
                let max = self.max_ns.load(Ordering::Relaxed);
                return Duration::from_nanos(bucket_upper(b).min(max));
            }
        }
        self.max()
    }

    pub fn max(&self) -> Duration {
        Duration::from_nanos(self.max_ns.load(Ordering::Relaxed))
    }

    pub fn mean(&self) -> Duration {
        let n = self.count();
        if n == 0 {
            return Duration::ZERO;
        }
        Duration::from_nanos(self.sum_ns.load(Ordering::Relaxed) / n)
    }

    pub fn summary(&self) -> LatencySummary {
        LatencySummary {
            count: self.count(),
            p50_us: self.quantile(0.5).as_secs_f64() * 1e6,
            p99_us: self.quantile(0.99).as_secs_f64() * 1e6,
            max_us: self.max().as_secs_f64() * 1e6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bucket_edges_monotone() {
        for b in 1..SUB * OCTAVES {
            assert!(bucket_upper(b) > bucket_upper(b - 1), "bucket {b}");
        }
    }

    proptest! {
        #[test]
        fn value_within_its_bucket(ns in 0u64..(1 << 40)) {
            let b = bucket_of(ns);
            prop_assert!(ns <= bucket_upper(b));
            if b > 0 {
                prop_assert!(ns > bucket_upper(b - 1));
            }
        }

        #[test]
        fn quantile_close_to_exact(mut xs in proptest::collection::vec(1u64..10_000_000, 1..300)) {
            let h = LatencyHistogram::default();
            for x in &xs { h.record(Duration::from_nanos(*x)); }
            xs.sort_unstable();
            let exact = xs[((0.99 * xs.len() as f64).ceil() as usize).max(1) - 1];
            let got = h.quantile(0.99).as_nanos() as f64;
            prop_assert!((got - exact as f64).abs() <= exact as f64 / 15.0 + 1.0, "{} vs {}", got, exact);
        }
    }
}
