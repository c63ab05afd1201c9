use std::time::Duration;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Zipf,
}

/// Open-loop request mix over a set of plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub distribution: Distribution,
    pub alpha: f64,
    /// Share of single-record (latency-sensitive) requests; the rest carry `batch_size`.
    pub latency_fraction: f64,
    pub batch_size: usize,
    /// Requests per second, Poisson arrivals.
    pub rate: f64,
    pub duration: Duration,
}

impl Default for LoadProfile {
    fn default() -> Self {
        LoadProfile {
            distribution: Distribution::Zipf,
            alpha: 2.0,
            latency_fraction: 0.5,
            batch_size: 100,
            rate: 100.0,
            duration: Duration::from_secs(3),
        }
    }
}

impl LoadProfile {
    pub fn mean_records(&self) -> f64 {
        self.latency_fraction + (1.0 - self.latency_fraction) * self.batch_size as f64
    }
}

/// Popularity of plan ranks `1..=n`, proportional to `rank^-alpha` and normalized.
pub fn zipf_weights(n: usize, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-alpha)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Request {
    /// Offset from the start of the run.
    pub at: Duration,
    /// Index into the plan list; 0 is the most popular.
    pub plan: usize,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestTrace {
    pub seed: u64,
    pub requests: Vec<Request>,
}

impl RequestTrace {
    pub fn generate(profile: &LoadProfile, plans: usize, seed: u64) -> Self {
        assert!(plans > 0, "trace needs at least one plan");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = match profile.distribution {
            Distribution::Uniform => vec![1.0; plans],
            Distribution::Zipf => zipf_weights(plans, profile.alpha),
        };
        let pick = WeightedIndex::new(&weights).expect("positive weights");
        let gap = Exp::new(profile.rate.max(1e-9)).expect("positive rate");
        let mut t = 0.0;
        let mut requests = Vec::new();
        loop {
            t += gap.sample(&mut rng);
            if t >= profile.duration.as_secs_f64() {
                break;
            }
            let records = if rng.random_bool(profile.latency_fraction.clamp(0.0, 1.0)) {
                1
            } else {
                profile.batch_size.max(1)
            };
            requests.push(Request {
                at: Duration::from_secs_f64(t),
                plan: pick.sample(&mut rng),
                records,
            });
        }
        RequestTrace { seed, requests }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn zipf_weights_follow_power_law(n in 1usize..200, alpha in 0.5f64..3.0) {
            let w = zipf_weights(n, alpha);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 1..n {
                // w_i / w_{i+1} = ((i+1)/i)^alpha, independent of normalization.
                let expect = ((i + 1) as f64 / i as f64).powf(alpha);
                prop_assert!((w[i - 1] / w[i] - expect).abs() < 1e-9 * expect);
            }
        }
    }

    #[test]
    fn trace_is_reproducible_and_skewed() {
        let p = LoadProfile {
            rate: 2000.0,
            ..LoadProfile::default()
        };
        let a = RequestTrace::generate(&p, 20, 4);
        assert_eq!(a, RequestTrace::generate(&p, 20, 4));
        let n = a.requests.len() as f64;
        assert!((n - 6000.0).abs() < 400.0, "{n}");
        let top = a.requests.iter().filter(|r| r.plan == 0).count() as f64 / n;
        let expect = zipf_weights(20, 2.0)[0];
        assert!((top - expect).abs() < 0.03, "{top} vs {expect}");
        let single = a.requests.iter().filter(|r| r.records == 1).count() as f64 / n;
        assert!((single - 0.5).abs() < 0.03);
        assert!(a.requests.windows(2).all(|w| w[0].at <= w[1].at));
    }
}
