//! Plan registration into a shared catalog and the two execution engines:
//! request-response (inline on the calling thread) and batch (through the scheduler).

mod catalog;
pub(crate) mod exec;
mod metrics;
mod pool;
mod record;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::TransformGraph;
use crate::ops::KernelError;
use crate::optimizer::{self, EngineHint, ModelPlan, OptimizeError};
use crate::scheduler::{BatchHandle, Scheduler, SchedulerConfig, SchedulerMetrics};
use crate::store::{CacheStats, ObjectStore, StoreError, StoreStats};

pub use catalog::{Catalog, PrefixEntry, RegisterOptions, ResolvedPlan, ResolvedStep};
pub use exec::{ExecEnv, WorkerContext};
pub use metrics::{LatencyHistogram, LatencySummary};
pub use pool::{class_of, class_size, PoolStats, VectorPool};
pub use record::{digest_inputs, Bound, Record, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanId(pub u32);

impl fmt::Display for PlanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    /// Sigmoid of the score, for linear classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("unknown plan {0}")]
    UnknownPlan(PlanId),
    #[error("record column `{column}`: {reason}")]
    Schema { column: String, reason: String },
    #[error("batch must contain at least one record")]
    EmptyBatch,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error("final stage did not produce a scalar")]
    NotScalar,
    #[error("cannot reserve {requested} workers; at most {available} can be spared")]
    Capacity { requested: usize, available: usize },
    #[error("plan {0} already has a reservation")]
    AlreadyReserved(PlanId),
    #[error("queue full")]
    Backpressure,
    #[error("runtime is shutting down")]
    Shutdown,
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Resolve each plan's call chain and load its stages at registration. When off,
    /// resolution happens on every prediction.
    pub pre_resolve: bool,
    pub pooling: bool,
    /// Serve shared featurization prefixes from the object store's cache.
    pub materialization: bool,
    pub scheduler: SchedulerConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            pre_resolve: true,
            pooling: true,
            materialization: true,
            scheduler: SchedulerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanMetrics {
    pub plan: PlanId,
    /// Successful predictions from both engines; batch records count from submission.
    pub latency: LatencySummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct RuntimeMetrics {
    pub plans: Vec<PlanMetrics>,
    pub predictions: u64,
    pub stage_instances: usize,
    pub plan_stages: usize,
    pub pool: PoolStats,
    pub cache: CacheStats,
    pub store: StoreStats,
    pub scheduler: Option<SchedulerMetrics>,
}

/// A reservation as granted, for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Reservation {
    pub plan: PlanId,
    pub cores: usize,
}

/// The serving core. Cheap to share behind an `Arc`.
pub struct Runtime {
    config: RuntimeConfig,
    env: Arc<ExecEnv>,
    catalog: RwLock<Catalog>,
    contexts: Mutex<Vec<WorkerContext>>,
    scheduler: OnceLock<Scheduler>,
    reservations: Mutex<Vec<Reservation>>,
    shut: AtomicBool,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("config", &self.config)
            .field("plans", &self.catalog.read().plan_count())
            .finish()
    }
}

impl Runtime {
    pub fn new(store: Arc<ObjectStore>, config: RuntimeConfig) -> Self {
        let env = Arc::new(ExecEnv {
            store,
            materialize: AtomicBool::new(config.materialization),
            pooling: config.pooling,
        });
        Runtime {
            config,
            env,
            catalog: RwLock::new(Catalog::default()),
            contexts: Mutex::new(Vec::new()),
            scheduler: OnceLock::new(),
            reservations: Mutex::new(Vec::new()),
            shut: AtomicBool::new(false),
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<ObjectStore> {
        &self.env.store
    }

    pub fn set_materialization(&self, on: bool) {
        self.env.materialize.store(on, Ordering::Relaxed);
    }

    /// Plans and registers a graph.
    pub fn register_graph(&self, graph: &TransformGraph, options: RegisterOptions) -> Result<PlanId, RuntimeError> {
        let plan = optimizer::plan(graph, &self.env.store)?;
        self.register(plan, options)
    }

    /// Registers a plan. Registering an identical plan again returns the existing id.
    pub fn register(&self, plan: ModelPlan, options: RegisterOptions) -> Result<PlanId, RuntimeError> {
        for p in &plan.param_refs {
            if !self.env.store.contains(p) {
                return Err(StoreError::NotFound(*p).into());
            }
        }
        let id = {
            let mut cat = self.catalog.write();
            if let Some(id) = cat.find(&plan.digest) {
                return Ok(id);
            }
            for p in &plan.param_refs {
                self.env.store.retain(p)?;
            }
            let engine = options.engine_hint.unwrap_or(plan.engine_hint);
            let id = cat.insert(Arc::new(plan), engine);
            if self.config.pre_resolve {
                let resolved = Arc::new(cat.resolve(id, &self.env.store)?);
                cat.plans.get_mut(&id).expect("inserted").resolved = Some(resolved.clone());
                drop(cat);
                self.prewarm_contexts(&resolved);
            }
            id
        };
        if let Some(cores) = options.reservation {
            self.reserve(id, cores)?;
        }
        Ok(id)
    }

    /// Sizes idle request-response contexts for `plan`, creating one if none exist.
    fn prewarm_contexts(&self, plan: &ResolvedPlan) {
        let mut cxs = self.contexts.lock();
        if cxs.is_empty() {
            cxs.push(WorkerContext::new(self.config.pooling));
        }
        for cx in cxs.iter_mut() {
            cx.prewarm(plan);
        }
    }

    pub fn plan(&self, id: PlanId) -> Option<Arc<ModelPlan>> {
        self.catalog.read().plan(id).cloned()
    }

    pub fn plan_ids(&self) -> Vec<PlanId> {
        self.catalog.read().plan_ids().to_vec()
    }

    pub fn engine(&self, id: PlanId) -> Option<EngineHint> {
        self.catalog.read().plans.get(&id).map(|e| e.engine)
    }

    /// Distinct physical stage instances loaded.
    pub fn stage_instances(&self) -> usize {
        self.catalog.read().stage_instances()
    }

    pub fn with_catalog<R>(&self, f: impl FnOnce(&Catalog) -> R) -> R {
        f(&self.catalog.read())
    }

    fn resolved(&self, id: PlanId) -> Result<Arc<ResolvedPlan>, RuntimeError> {
        {
            let cat = self.catalog.read();
            let entry = cat.plans.get(&id).ok_or(RuntimeError::UnknownPlan(id))?;
            if let Some(r) = &entry.resolved {
                return Ok(r.clone());
            }
            if let Some(r) = cat.resolve_cached(id) {
                return r.map(Arc::new);
            }
        }
        self.catalog.write().resolve(id, &self.env.store).map(Arc::new)
    }

    /// Request-response engine: runs the whole plan on the calling thread.
    pub fn predict(&self, id: PlanId, record: &Record) -> Result<Prediction, RuntimeError> {
        let start = Instant::now();
        let plan = self.resolved(id)?;
        let bound = record.bind(&plan.source_schema)?;
        let mut cx = self
            .contexts
            .lock()
            .pop()
            .unwrap_or_else(|| WorkerContext::new(self.config.pooling));
        let result = cx.run(&self.env, &plan, &bound);
        self.contexts.lock().push(cx);
        if result.is_ok() {
            plan.metrics.record(start.elapsed());
        }
        result
    }

    fn scheduler(&self) -> Result<&Scheduler, RuntimeError> {
        if self.shut.load(Ordering::Acquire) {
            return Err(RuntimeError::Shutdown);
        }
        Ok(self
            .scheduler
            .get_or_init(|| Scheduler::new(self.config.scheduler.clone(), self.env.clone())))
    }

    /// Batch engine: one scheduled instance per record; results in input order.
    pub fn submit_batch(&self, id: PlanId, records: Vec<Record>) -> Result<BatchHandle, RuntimeError> {
        if records.is_empty() {
            return Err(RuntimeError::EmptyBatch);
        }
        let plan = self.resolved(id)?;
        for r in &records {
            r.bind(&plan.source_schema)?;
        }
        self.scheduler()?.submit(plan, records)
    }

    pub fn predict_batch(&self, id: PlanId, records: &[Record]) -> Result<Vec<Prediction>, RuntimeError> {
        let handle = self.submit_batch(id, records.to_vec())?;
        handle.wait().into_iter().collect()
    }

    /// Dedicates `cores` scheduler workers to `id`.
    pub fn reserve(&self, id: PlanId, cores: usize) -> Result<Reservation, RuntimeError> {
        let plan = self.resolved(id)?;
        self.scheduler()?.reserve(&plan, cores, 4)?;
        let r = Reservation { plan: id, cores };
        self.reservations.lock().push(r);
        Ok(r)
    }

    pub fn reservations(&self) -> Vec<Reservation> {
        self.reservations.lock().clone()
    }

    pub fn scheduler_handle(&self) -> Option<&Scheduler> {
        self.scheduler.get()
    }

    /// Pool totals over idle request-response contexts and scheduler workers.
    pub fn pool_stats(&self) -> PoolStats {
        let mut total = PoolStats::default();
        for cx in self.contexts.lock().iter() {
            let s = cx.pool.stats();
            total.growth += s.growth;
            total.acquired += s.acquired;
            total.released += s.released;
            total.outstanding += s.outstanding;
            total.high_water += s.high_water;
            total.pooled += s.pooled;
        }
        if let Some(s) = self.scheduler.get() {
            let p = s.pool_stats();
            total.growth += p.growth;
            total.acquired += p.acquired;
            total.released += p.released;
            total.outstanding += p.outstanding;
            total.high_water += p.high_water;
            total.pooled += p.pooled;
        }
        total
    }

    /// Bytes held by idle pools and workspaces.
    pub fn pool_bytes(&self) -> usize {
        self.contexts
            .lock()
            .iter()
            .map(|c| c.pool.pooled_bytes() + c.ws.heap_bytes())
            .sum()
    }

    pub fn latency(&self, id: PlanId) -> Option<Arc<LatencyHistogram>> {
        self.catalog.read().plans.get(&id).map(|e| e.metrics.clone())
    }

    pub fn metrics(&self) -> RuntimeMetrics {
        let cat = self.catalog.read();
        let plans: Vec<PlanMetrics> = cat
            .plans
            .iter()
            .map(|(id, e)| PlanMetrics {
                plan: *id,
                latency: e.metrics.summary(),
            })
            .collect();
        RuntimeMetrics {
            predictions: plans.iter().map(|p| p.latency.count).sum(),
            plans,
            stage_instances: cat.stage_instances(),
            plan_stages: cat.plan_stage_total(),
            pool: self.pool_stats(),
            cache: self.env.store.materialization().stats(),
            store: self.env.store.stats(),
            scheduler: self.scheduler.get().map(Scheduler::metrics),
        }
    }

    pub fn shutdown(&self) {
        self.shut.store(true, Ordering::Release);
        if let Some(s) = self.scheduler.get() {
            s.shutdown();
        }
    }
}
