//! Desk-scale reproductions of the four serving scenarios: parameter memory,
//! cold/hot latency with ablations, batch throughput scaling and heavy skewed
//! load with reservation. Each scenario returns a report carrying its raw samples
//! and a list of [`Check`]s; CSV layouts are documented in `docs/bench-csv.md`.

mod heavy;
mod latency;
mod load;
mod memory;
mod throughput;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::bundle::{load_bundle, read_fleet_spec, sample_records, FleetSpec};
use crate::runtime::{PlanId, Record, RegisterOptions, Runtime, RuntimeConfig};
use crate::store::{ObjectStore, StoreConfig};

pub use heavy::{scenario_heavy_load, HeavyConfig, HeavyReport, HeavyRow};
pub use latency::{
    scenario_latency, scenario_materialization, LatencyConfig, LatencyReport, LatencyRow, MaterializationReport,
    MaterializationRow, Variant, VariantSummary,
};
pub use load::{zipf_weights, Distribution, LoadProfile, Request, RequestTrace};
pub use memory::{scenario_memory, MemoryReport, MemoryRow};
pub use throughput::{scenario_throughput, ThroughputConfig, ThroughputReport, ThroughputRow};

/// One pass/fail assertion of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

/// A fleet written by [`crate::bundle::write_fleet`].
#[derive(Clone, Debug)]
pub struct BenchFleet {
    pub spec: FleetSpec,
    pub bundles: Vec<PathBuf>,
}

impl BenchFleet {
    pub fn open(dir: &Path) -> crate::Result<Self> {
        let spec = read_fleet_spec(dir)?;
        let bundles = (0..spec.count).map(|i| dir.join(spec.name(i))).collect();
        Ok(BenchFleet { spec, bundles })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn records(&self, seed: u64, n: usize) -> Vec<Record> {
        sample_records(&self.spec, seed, n)
    }

    /// Fresh store and runtime with every bundle registered, in fleet order.
    pub fn load(&self, config: RuntimeConfig, store: StoreConfig) -> crate::Result<(Arc<Runtime>, Vec<PlanId>)> {
        let store = Arc::new(ObjectStore::with_config(store));
        let rt = Arc::new(Runtime::new(store.clone(), config));
        let mut ids = Vec::with_capacity(self.bundles.len());
        for b in &self.bundles {
            let (g, _) = load_bundle(b, &store)?;
            ids.push(rt.register_graph(&g, RegisterOptions::default())?);
        }
        Ok((rt, ids))
    }
}

/// Nearest-rank quantile of `samples`; sorts in place.
pub fn quantile(samples: &mut [f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.sort_by(f64::total_cmp);
    let rank = (q * samples.len() as f64).ceil() as usize;
    samples[rank.clamp(1, samples.len()) - 1]
}

pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<f64>() / samples.len() as f64
    }
}

/// Resident set size of this process in KiB, where the platform exposes it.
pub fn rss_kib() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let mut xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&mut xs, 0.5), 50.0);
        assert_eq!(quantile(&mut xs, 0.99), 99.0);
        assert_eq!(quantile(&mut xs, 1.0), 100.0);
        assert_eq!(quantile(&mut [7.0], 0.99), 7.0);
        assert_eq!(quantile(&mut [], 0.5), 0.0);
    }
}
