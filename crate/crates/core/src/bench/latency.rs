use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{mean, quantile, BenchFleet, Check};
use crate::runtime::{Record, RuntimeConfig};
use crate::store::StoreConfig;

/// Runtime configurations compared by the latency scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    NoPreResolve,
    NoPooling,
    NoMaterialization,
    NoPreResolveNoPooling,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::NoPreResolve,
        Variant::NoPooling,
        Variant::NoMaterialization,
        Variant::NoPreResolveNoPooling,
    ];

    pub fn config(self) -> RuntimeConfig {
        let mut c = RuntimeConfig::default();
        match self {
            Variant::Baseline => {}
            Variant::NoPreResolve => c.pre_resolve = false,
            Variant::NoPooling => c.pooling = false,
            Variant::NoMaterialization => c.materialization = false,
            Variant::NoPreResolveNoPooling => {
                c.pre_resolve = false;
                c.pooling = false;
            }
        }
        c.scheduler.pooling = c.pooling;
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::NoPreResolve => "no-pre-resolve",
            Variant::NoPooling => "no-pooling",
            Variant::NoMaterialization => "no-materialization",
            Variant::NoPreResolveNoPooling => "no-pre-resolve-no-pooling",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    /// Predictions after the cold one that are thrown away.
    pub discard: usize,
    pub hot: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            discard: 10,
            hot: 100,
            seed: 42,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub variant: Variant,
    pub plan: usize,
    pub cold_us: f64,
    /// Average of the hot predictions.
    pub hot_us: f64,
    pub hot_p50_us: f64,
    pub hot_p99_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub plans: usize,
    pub cold_p50_us: f64,
    pub cold_p99_us: f64,
    pub cold_max_us: f64,
    pub hot_mean_us: f64,
    pub hot_p99_us: f64,
    pub hot_max_us: f64,
    pub cold_hot_p99_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub seed: u64,
    pub rows: Vec<LatencyRow>,
    /// Raw hot samples in microseconds, per row.
    pub hot_samples: Vec<Vec<f64>>,
    pub summaries: Vec<VariantSummary>,
    pub checks: Vec<Check>,
}

impl LatencyReport {
    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }
}

fn time_us(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e6
}

/// Per plan, in fleet order: the first prediction is cold, the next `discard` are
/// dropped and the following `hot` are hot. Every variant gets its own runtime,
/// all loaded up front; for each plan the variants run back to back in rotating
/// order so drift over the run does not favor any of them.
pub fn scenario_latency(fleet: &BenchFleet, config: &LatencyConfig) -> crate::Result<LatencyReport> {
    let records = fleet.records(config.seed, 1 + config.discard + config.hot);
    let runtimes = config
        .variants
        .iter()
        .map(|v| fleet.load(v.config(), StoreConfig::default()))
        .collect::<crate::Result<Vec<_>>>()?;
    let nv = runtimes.len();
    let plans = runtimes.first().map_or(0, |(_, ids)| ids.len());
    let mut cells: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::with_capacity(plans); nv];
    for i in 0..plans {
        for k in 0..nv {
            let v = (k + i) % nv;
            let (rt, ids) = &runtimes[v];
            let id = ids[i];
            let mut err = None;
            let mut run = |r: &Record| {
                time_us(|| {
                    if let Err(e) = rt.predict(id, r) {
                        err.get_or_insert(e);
                    }
                })
            };
            let cold = run(&records[0]);
            for r in &records[1..=config.discard] {
                run(r);
            }
            let hot: Vec<f64> = records[1 + config.discard..].iter().map(&mut run).collect();
            if let Some(e) = err {
                return Err(e.into());
            }
            cells[v].push((cold, hot));
        }
    }
    for (rt, _) in &runtimes {
        rt.shutdown();
    }
    let mut rows = Vec::new();
    let mut hot_samples = Vec::new();
    let mut summaries = Vec::new();
    for (&variant, cells) in config.variants.iter().zip(cells) {
        let mut colds = Vec::with_capacity(plans);
        let mut hots = Vec::new();
        for (i, (cold, mut hot)) in cells.into_iter().enumerate() {
            hots.extend_from_slice(&hot);
            colds.push(cold);
            rows.push(LatencyRow {
                variant,
                plan: i,
                cold_us: cold,
                hot_us: mean(&hot),
                hot_p50_us: quantile(&mut hot, 0.5),
                hot_p99_us: quantile(&mut hot, 0.99),
            });
            hot_samples.push(hot);
        }
        let cold_p99 = quantile(&mut colds, 0.99);
        let hot_p99 = quantile(&mut hots, 0.99);
        summaries.push(VariantSummary {
            variant,
            plans,
            cold_p50_us: quantile(&mut colds, 0.5),
            cold_p99_us: cold_p99,
            cold_max_us: quantile(&mut colds, 1.0),
            hot_mean_us: mean(&hots),
            hot_p99_us: hot_p99,
            hot_max_us: quantile(&mut hots, 1.0),
            cold_hot_p99_ratio: cold_p99 / hot_p99.max(1e-9),
        });
    }
    let mut report = LatencyReport {
        seed: config.seed,
        rows,
        hot_samples,
        summaries,
        checks: Vec::new(),
    };
    report.checks = latency_checks(&report);
    Ok(report)
}

fn latency_checks(r: &LatencyReport) -> Vec<Check> {
    let mut out = Vec::new();
    if let (Some(b), Some(p)) = (r.summary(Variant::Baseline), r.summary(Variant::NoPooling)) {
        out.push(Check::new(
            "pooling off increases hot latency",
            p.hot_mean_us > b.hot_mean_us,
            format!("hot mean {:.2}us off vs {:.2}us on", p.hot_mean_us, b.hot_mean_us),
        ));
    }
    if let (Some(b), Some(p)) = (r.summary(Variant::Baseline), r.summary(Variant::NoPreResolve)) {
        out.push(Check::new(
            "pre-resolved chains lower cold/hot ratio",
            b.cold_hot_p99_ratio < p.cold_hot_p99_ratio,
            format!(
                "{:.2} with vs {:.2} without",
                b.cold_hot_p99_ratio, p.cold_hot_p99_ratio
            ),
        ));
    }
    if let (Some(b), Some(p)) = (r.summary(Variant::Baseline), r.summary(Variant::NoPreResolveNoPooling)) {
        out.push(Check::new(
            "pre-resolve and pooling lower cold/hot ratio",
            b.cold_hot_p99_ratio < p.cold_hot_p99_ratio,
            format!(
                "{:.2} with both vs {:.2} with neither",
                b.cold_hot_p99_ratio, p.cold_hot_p99_ratio
            ),
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaterializationRow {
    pub plan: usize,
    pub shared_prefix: bool,
    pub off_median_us: f64,
    pub on_median_us: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MaterializationReport {
    pub seed: u64,
    pub rows: Vec<MaterializationRow>,
    /// Median over affected plans of their median hot latency.
    pub off_median_us: f64,
    pub on_median_us: f64,
    pub improvement: f64,
    pub cache_hit_rate: f64,
    pub checks: Vec<Check>,
}

/// Hot latency with the sub-plan cache off and on. The same records go to every
/// plan, with the plan order rotated per record so each plan sees both first
/// (cache-filling) and later (cache-hitting) requests. Off and on runtimes are
/// measured alternately on the same trace.
pub fn scenario_materialization(fleet: &BenchFleet, config: &LatencyConfig) -> crate::Result<MaterializationReport> {
    let records = fleet.records(config.seed, 1 + config.discard + config.hot);
    let off_cfg = Variant::NoMaterialization.config();
    let on_cfg = Variant::Baseline.config();
    let (off, ids_off) = fleet.load(off_cfg, StoreConfig::default())?;
    let (on, ids_on) = fleet.load(on_cfg, StoreConfig::default())?;
    let n = ids_on.len();
    let mut samples_off = vec![Vec::with_capacity(config.hot); n];
    let mut samples_on = vec![Vec::with_capacity(config.hot); n];
    for (ri, rec) in records.iter().enumerate() {
        let hot = ri > config.discard;
        for k in 0..n {
            let p = (k + ri) % n;
            // Alternate which runtime goes first to cancel drift.
            let order = if (ri + k) % 2 == 0 {
                [false, true]
            } else {
                [true, false]
            };
            for use_on in order {
                let (rt, id) = if use_on { (&on, ids_on[p]) } else { (&off, ids_off[p]) };
                let mut res = Ok(());
                let t = time_us(|| res = rt.predict(id, rec).map(drop));
                res?;
                if hot {
                    if use_on {
                        samples_on[p].push(t);
                    } else {
                        samples_off[p].push(t);
                    }
                }
            }
        }
    }
    let shared: Vec<bool> = ids_on
        .iter()
        .map(|id| on.with_catalog(|c| c.has_shared_prefix(*id)))
        .collect();
    let mut rows = Vec::with_capacity(n);
    for p in 0..n {
        let off_m = quantile(&mut samples_off[p], 0.5);
        let on_m = quantile(&mut samples_on[p], 0.5);
        rows.push(MaterializationRow {
            plan: p,
            shared_prefix: shared[p],
            off_median_us: off_m,
            on_median_us: on_m,
            speedup: off_m / on_m.max(1e-9),
        });
    }
    let mut off_meds: Vec<f64> = rows
        .iter()
        .filter(|r| r.shared_prefix)
        .map(|r| r.off_median_us)
        .collect();
    let mut on_meds: Vec<f64> = rows
        .iter()
        .filter(|r| r.shared_prefix)
        .map(|r| r.on_median_us)
        .collect();
    let off_median = quantile(&mut off_meds, 0.5);
    let on_median = quantile(&mut on_meds, 0.5);
    let improvement = off_median / on_median.max(1e-9);
    let cache = on.store().materialization().stats();
    on.shutdown();
    off.shutdown();
    let worst = rows
        .iter()
        .map(|r| r.on_median_us / r.off_median_us.max(1e-9))
        .fold(0.0, f64::max);
    let affected = rows.iter().filter(|r| r.shared_prefix).count();
    let checks = vec![
        Check::new(
            "plans share a cacheable prefix",
            affected > 0,
            format!("{affected} of {n} plans"),
        ),
        Check::new(
            "median hot latency improves at least 1.5x",
            improvement >= 1.5,
            format!("{off_median:.2}us off, {on_median:.2}us on, {improvement:.2}x"),
        ),
        Check::new(
            "no plan regresses more than 5%",
            worst <= 1.05,
            format!("worst on/off ratio {worst:.3}"),
        ),
    ];
    Ok(MaterializationReport {
        seed: config.seed,
        rows,
        off_median_us: off_median,
        on_median_us: on_median,
        improvement,
        cache_hit_rate: cache.hit_rate,
        checks,
    })
}
