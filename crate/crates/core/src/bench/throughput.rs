use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BenchFleet, Check};
use crate::runtime::{RuntimeConfig, RuntimeError};
use crate::store::StoreConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    pub cores: Vec<usize>,
    pub batch: usize,
    /// Batches submitted together per measurement, spread round-robin over plans.
    pub batches: usize,
    pub plans: usize,
    /// Measurements per core count; the best is kept.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        ThroughputConfig {
            cores: vec![2, 4, 8],
            batch: 1000,
            batches: 8,
            plans: 8,
            repeats: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub cores: usize,
    pub records: usize,
    pub seconds: f64,
    pub throughput: f64,
    /// Linear extrapolation from the smallest core count.
    pub ideal: f64,
    pub efficiency: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ThroughputReport {
    pub seed: u64,
    pub available_parallelism: usize,
    pub rows: Vec<ThroughputRow>,
    pub checks: Vec<Check>,
}

/// Batch-engine throughput over 1000-record batches for each worker count.
pub fn scenario_throughput(fleet: &BenchFleet, config: &ThroughputConfig) -> crate::Result<ThroughputReport> {
    let records = fleet.records(config.seed, config.batch);
    let mut rows: Vec<ThroughputRow> = Vec::new();
    for &cores in &config.cores {
        let mut rc = RuntimeConfig::default();
        rc.scheduler.workers = cores;
        let (rt, ids) = fleet.load(rc, StoreConfig::default())?;
        let ids = &ids[..config.plans.clamp(1, ids.len())];
        for id in ids {
            rt.predict_batch(*id, &records[..records.len().min(64)])?;
        }
        let mut best = f64::INFINITY;
        let total = config.batch * config.batches;
        for _ in 0..config.repeats.max(1) {
            let t = Instant::now();
            let handles = (0..config.batches)
                .map(|b| rt.submit_batch(ids[b % ids.len()], records.clone()))
                .collect::<Result<Vec<_>, RuntimeError>>()?;
            for h in handles {
                for r in h.wait() {
                    r?;
                }
            }
            best = best.min(t.elapsed().as_secs_f64());
        }
        rt.shutdown();
        let throughput = total as f64 / best;
        let (base_cores, base) = rows
            .first()
            .map(|r| (r.cores, r.throughput))
            .unwrap_or((cores, throughput));
        let ideal = base * cores as f64 / base_cores as f64;
        rows.push(ThroughputRow {
            cores,
            records: total,
            seconds: best,
            throughput,
            ideal,
            efficiency: throughput / ideal,
        });
    }
    let mut checks = Vec::new();
    let at = |c: usize| rows.iter().find(|r| r.cores == c).map(|r| r.throughput);
    if let (Some(t2), Some(t8)) = (at(2), at(8)) {
        checks.push(Check::new(
            "8 workers reach 70% of 4x the 2-worker throughput",
            t8 >= 0.7 * 4.0 * t2,
            format!("{t8:.0} rec/s at 8 vs {t2:.0} rec/s at 2 ({:.2}x)", t8 / t2),
        ));
    }
    Ok(ThroughputReport {
        seed: config.seed,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        rows,
        checks,
    })
}
