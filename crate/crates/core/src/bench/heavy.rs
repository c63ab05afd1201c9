use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::load::{Distribution, LoadProfile, RequestTrace};
use super::{quantile, BenchFleet, Check};
use crate::runtime::{PlanId, Record, Runtime, RuntimeConfig, RuntimeError};
use crate::scheduler::BatchHandle;
use crate::store::StoreConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeavyConfig {
    pub workers: usize,
    /// Offered load per sweep point, as multiples of the measured capacity.
    pub loads: Vec<f64>,
    pub profile: LoadProfile,
    /// Dedicate one worker to the least popular plan and drive it separately.
    pub reserve: bool,
    /// Single-record requests per second sent to the reserved plan.
    pub reserved_rate: f64,
    pub seed: u64,
}

impl Default for HeavyConfig {
    fn default() -> Self {
        HeavyConfig {
            workers: 4,
            loads: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            profile: LoadProfile::default(),
            reserve: true,
            reserved_rate: 50.0,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeavyRow {
    /// 0 for the isolated reserved-plan run.
    pub load: f64,
    pub offered_requests_per_s: f64,
    pub offered_records_per_s: f64,
    pub requests: usize,
    pub rejected: usize,
    /// Records shed by queue backpressure after admission of their request.
    pub shed_records: usize,
    pub completed_records: usize,
    pub seconds: f64,
    pub throughput: f64,
    pub latency_sensitive_p50_us: f64,
    pub latency_sensitive_p99_us: f64,
    pub reserved_p99_us: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeavyReport {
    pub seed: u64,
    pub workers: usize,
    pub capacity_records_per_s: f64,
    pub reserved_plan: Option<usize>,
    pub isolated: Option<HeavyRow>,
    pub rows: Vec<HeavyRow>,
    pub checks: Vec<Check>,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Latency,
    Batch,
    Reserved,
}

struct Sent {
    kind: Kind,
    records: usize,
    at: Instant,
    handle: BatchHandle,
}

#[derive(Default)]
struct Collected {
    records: usize,
    /// Records shed by queue backpressure.
    shed: usize,
    last_done: Option<Instant>,
    latency: Vec<f64>,
    reserved: Vec<f64>,
    failed: usize,
    first_error: Option<RuntimeError>,
}

fn collect(rx: mpsc::Receiver<Sent>) -> Collected {
    let mut c = Collected::default();
    for s in rx {
        let mut ok = 0;
        for r in s.handle.wait() {
            match r {
                Ok(_) => ok += 1,
                Err(RuntimeError::Backpressure) => c.shed += 1,
                Err(e) => {
                    c.failed += 1;
                    c.first_error.get_or_insert(e);
                }
            }
        }
        if ok == 0 {
            continue;
        }
        let lat = s.handle.latency().unwrap_or_default();
        let done = s.at + lat;
        c.last_done = Some(c.last_done.map_or(done, |d: Instant| d.max(done)));
        c.records += ok;
        if ok < s.records {
            continue;
        }
        let us = lat.as_secs_f64() * 1e6;
        match s.kind {
            Kind::Latency => c.latency.push(us),
            Kind::Batch => {}
            Kind::Reserved => c.reserved.push(us),
        }
    }
    c
}

/// Replays `trace` against `plans`, sending handles to the collector. Returns
/// (sent, rejected).
fn generate(
    rt: &Runtime,
    plans: &[PlanId],
    trace: &RequestTrace,
    pool: &[Record],
    start: Instant,
    reserved: bool,
    tx: mpsc::Sender<Sent>,
) -> Result<(usize, usize), RuntimeError> {
    let mut rejected = 0;
    for (i, r) in trace.requests.iter().enumerate() {
        let due = start + r.at;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        let off = (i * 37) % pool.len();
        let recs: Vec<Record> = pool.iter().cycle().skip(off).take(r.records).cloned().collect();
        let at = Instant::now();
        match rt.submit_batch(plans[r.plan], recs) {
            Ok(handle) => {
                let kind = match (reserved, r.records) {
                    (true, _) => Kind::Reserved,
                    (false, 1) => Kind::Latency,
                    _ => Kind::Batch,
                };
                let _ = tx.send(Sent {
                    kind,
                    records: r.records,
                    at,
                    handle,
                });
            }
            Err(RuntimeError::Backpressure) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((trace.requests.len(), rejected))
}

struct Point<'a> {
    rt: &'a Arc<Runtime>,
    shared: &'a [PlanId],
    reserved: Option<PlanId>,
    pool: &'a [Record],
    config: &'a HeavyConfig,
}

impl Point<'_> {
    fn run(&self, load: f64, capacity: f64, seed: u64) -> Result<HeavyRow, RuntimeError> {
        let profile = &self.config.profile;
        let rate = if load > 0.0 {
            capacity * load / profile.mean_records()
        } else {
            0.0
        };
        let main = (rate > 0.0).then(|| {
            RequestTrace::generate(
                &LoadProfile {
                    rate,
                    ..profile.clone()
                },
                self.shared.len(),
                seed,
            )
        });
        let side = self.reserved.map(|_| {
            RequestTrace::generate(
                &LoadProfile {
                    distribution: Distribution::Uniform,
                    latency_fraction: 1.0,
                    rate: self.config.reserved_rate,
                    ..profile.clone()
                },
                1,
                seed ^ 0x5eed,
            )
        });
        let (tx, rx) = mpsc::channel();
        let collector = thread::spawn(move || collect(rx));
        let start = Instant::now();
        let (sent, rejected) = thread::scope(|s| {
            let a = main.as_ref().map(|t| {
                let tx = tx.clone();
                s.spawn(move || generate(self.rt, self.shared, t, self.pool, start, false, tx))
            });
            let b = side.as_ref().zip(self.reserved).map(|(t, id)| {
                let tx = tx.clone();
                s.spawn(move || generate(self.rt, std::slice::from_ref(&id), t, self.pool, start, true, tx))
            });
            let mut sent = 0;
            let mut rejected = 0;
            for h in [a, b].into_iter().flatten() {
                let (n, r) = h.join().expect("generator panicked")?;
                sent += n;
                rejected += r;
            }
            Ok::<_, RuntimeError>((sent, rejected))
        })?;
        drop(tx);
        let mut c = collector.join().expect("collector panicked");
        if let Some(e) = c.first_error {
            return Err(RuntimeError::Internal(format!(
                "{} records failed, first: {e}",
                c.failed
            )));
        }
        let seconds = c
            .last_done
            .map_or(profile.duration, |d| d.saturating_duration_since(start))
            .max(profile.duration)
            .as_secs_f64();
        let main_records = main
            .as_ref()
            .map_or(0, |t| t.requests.iter().map(|r| r.records).sum::<usize>());
        Ok(HeavyRow {
            load,
            offered_requests_per_s: rate,
            offered_records_per_s: main_records as f64 / profile.duration.as_secs_f64(),
            requests: sent,
            rejected,
            shed_records: c.shed,
            completed_records: c.records,
            seconds,
            throughput: c.records as f64 / seconds,
            latency_sensitive_p50_us: quantile(&mut c.latency, 0.5),
            latency_sensitive_p99_us: quantile(&mut c.latency, 0.99),
            reserved_p99_us: self.reserved.map(|_| quantile(&mut c.reserved, 0.99)),
        })
    }
}

/// Measures closed-loop batch capacity in records per second.
fn capacity(rt: &Runtime, plans: &[PlanId], pool: &[Record]) -> Result<f64, RuntimeError> {
    let batch: Vec<Record> = pool.iter().take(100).cloned().collect();
    for p in plans.iter().take(4) {
        rt.predict_batch(*p, &batch[..8.min(batch.len())])?;
    }
    let t = Instant::now();
    let rounds = 16;
    let handles = (0..rounds)
        .map(|i| rt.submit_batch(plans[i % plans.len().min(4)], batch.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    for h in handles {
        for r in h.wait() {
            r?;
        }
    }
    Ok((rounds * batch.len()) as f64 / t.elapsed().as_secs_f64())
}

/// Zipf-skewed open-loop load swept over multiples of measured capacity, with an
/// optional reserved plan driven at a constant rate alongside.
pub fn scenario_heavy_load(fleet: &BenchFleet, config: &HeavyConfig) -> crate::Result<HeavyReport> {
    let mut rc = RuntimeConfig::default();
    rc.scheduler.workers = config.workers;
    let (rt, ids) = fleet.load(rc, StoreConfig::default())?;
    let reserve = config.reserve && ids.len() > 1;
    let (shared, reserved) = if reserve {
        (&ids[..ids.len() - 1], Some(ids[ids.len() - 1]))
    } else {
        (&ids[..], None)
    };
    let pool = fleet.records(config.seed, 1000);
    let cap = capacity(&rt, shared, &pool)?;
    if let Some(id) = reserved {
        rt.reserve(id, 1)?;
    }
    let point = Point {
        rt: &rt,
        shared,
        reserved,
        pool: &pool,
        config,
    };
    let isolated = match reserved {
        Some(_) => Some(point.run(0.0, cap, config.seed)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(config.loads.len());
    for (i, &load) in config.loads.iter().enumerate() {
        rows.push(point.run(load, cap, config.seed.wrapping_add(i as u64 + 1))?);
    }
    rt.shutdown();
    let checks = heavy_checks(&rows, isolated.as_ref());
    Ok(HeavyReport {
        seed: config.seed,
        workers: config.workers,
        capacity_records_per_s: cap,
        reserved_plan: reserved.map(|_| ids.len() - 1),
        isolated,
        rows,
        checks,
    })
}

fn heavy_checks(rows: &[HeavyRow], isolated: Option<&HeavyRow>) -> Vec<Check> {
    let mut out = Vec::new();
    let thr: Vec<f64> = rows.iter().map(|r| r.throughput).collect();
    let mut best = 0.0f64;
    let mut monotone = true;
    for t in &thr {
        monotone &= *t >= 0.9 * best;
        best = best.max(*t);
    }
    let shown = thr.iter().map(|t| format!("{t:.0}")).collect::<Vec<_>>().join(", ");
    out.push(Check::new(
        "throughput non-decreasing without collapse",
        monotone && !thr.is_empty(),
        format!("records/s: {shown}"),
    ));
    if let Some(last) = rows.last() {
        out.push(Check::new(
            "throughput plateaus under overload",
            last.offered_records_per_s > 1.1 * last.throughput && last.throughput >= 0.9 * best,
            format!(
                "offered {:.0} rec/s, achieved {:.0}, peak {best:.0}",
                last.offered_records_per_s, last.throughput
            ),
        ));
    }
    if let Some(iso) = isolated.and_then(|r| r.reserved_p99_us) {
        let worst = rows.iter().filter_map(|r| r.reserved_p99_us).fold(0.0, f64::max);
        out.push(Check::new(
            "reserved plan P99 within 2x of isolated",
            worst <= 2.0 * iso,
            format!("isolated {iso:.0}us, worst under load {worst:.0}us"),
        ));
    }
    out
}
