//! Event-based batch execution: one event per stage, a shared low/high queue pair,
//! late binding of events to workers, and reserved worker partitions per plan.

mod isolation;
mod queue;
pub mod sim;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::ops::{DataVector, Workspace};
use crate::runtime::exec::{execute_step, to_prediction, ExecEnv};
use crate::runtime::{PlanId, PoolStats, Prediction, Record, ResolvedPlan, RuntimeError, VectorPool};
use crate::store::Checksum;

pub use isolation::{placement, Placement};
pub use queue::{EventQueues, InstanceState, Priority, QueueFull, QueuePolicy, QueueStats};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub workers: usize,
    /// Maximum queued head events per partition.
    pub queue_bound: usize,
    /// Empty polls before a worker parks.
    pub park_threshold: u32,
    pub policy: QueuePolicy,
    pub pooling: bool,
    /// Pin reserved workers to their own CPUs, or lower shared workers' priority when
    /// there are not enough CPUs to pin.
    pub isolate_reserved: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            workers: 4,
            queue_bound: 16384,
            park_threshold: 100,
            policy: QueuePolicy::TwoQueue,
            pooling: true,
            isolate_reserved: true,
        }
    }
}

struct Event {
    inst: Arc<Instance>,
    stage: u16,
}

type SharedPool = Arc<Mutex<VectorPool>>;

/// One record's execution of a plan.
struct Instance {
    plan: Arc<ResolvedPlan>,
    record: Record,
    slots: Vec<RwLock<DataVector>>,
    completed: AtomicU64,
    pending: Vec<AtomicU32>,
    /// Events enqueued or running.
    outstanding: AtomicU32,
    origin: Mutex<Option<SharedPool>>,
    failed: Mutex<Option<RuntimeError>>,
    digest: Mutex<Option<Checksum>>,
    batch: Arc<BatchState>,
    index: usize,
}

impl Instance {
    fn new(plan: Arc<ResolvedPlan>, record: Record, batch: Arc<BatchState>, index: usize) -> Self {
        Instance {
            slots: plan
                .slot_caps
                .iter()
                .map(|_| RwLock::new(DataVector::default()))
                .collect(),
            pending: plan
                .steps
                .iter()
                .map(|s| AtomicU32::new(s.deps_mask.count_ones()))
                .collect(),
            plan,
            record,
            completed: AtomicU64::new(0),
            outstanding: AtomicU32::new(0),
            origin: Mutex::new(None),
            failed: Mutex::new(None),
            digest: Mutex::new(None),
            batch,
            index,
        }
    }

    /// Vectors are acquired on the first dequeue, from the dequeuing worker's pool.
    fn ensure_vectors(&self, pool: &SharedPool) {
        let mut origin = self.origin.lock();
        if origin.is_some() {
            return;
        }
        let mut p = pool.lock();
        for (slot, cap) in self.slots.iter().zip(&self.plan.slot_caps) {
            *slot.write() = p.acquire(*cap);
        }
        *origin = Some(pool.clone());
    }

    fn fail(&self, e: RuntimeError) {
        let mut f = self.failed.lock();
        if f.is_none() {
            *f = Some(e);
        }
    }

    /// Called once, when the last outstanding event finishes.
    fn finish(&self, metrics: &Metrics) {
        let result = match self.failed.lock().take() {
            Some(e) => {
                metrics.failed.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
            None => {
                metrics.completed.fetch_add(1, Ordering::Relaxed);
                self.plan.metrics.record(self.batch.submitted.elapsed());
                to_prediction(self.plan.predictor, &self.slots[self.plan.sink_slot as usize].read())
            }
        };
        if let Some(pool) = self.origin.lock().take() {
            let mut p = pool.lock();
            for s in &self.slots {
                p.release(std::mem::take(&mut *s.write()));
            }
        }
        self.batch.complete(self.index, result);
    }
}

struct BatchState {
    results: Mutex<Vec<Option<Result<Prediction, RuntimeError>>>>,
    remaining: AtomicUsize,
    done: Mutex<Option<Instant>>,
    cv: Condvar,
    submitted: Instant,
}

impl BatchState {
    fn complete(&self, index: usize, r: Result<Prediction, RuntimeError>) {
        self.results.lock()[index] = Some(r);
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            *self.done.lock() = Some(Instant::now());
            self.cv.notify_all();
        }
    }
}

/// Completion handle for a submitted batch.
pub struct BatchHandle(Arc<BatchState>);

impl BatchHandle {
    pub fn is_done(&self) -> bool {
        self.0.done.lock().is_some()
    }

    /// Blocks until every record has a result, then returns them in input order.
    pub fn wait(&self) -> Vec<Result<Prediction, RuntimeError>> {
        let mut done = self.0.done.lock();
        while done.is_none() {
            self.0.cv.wait(&mut done);
        }
        drop(done);
        self.0
            .results
            .lock()
            .iter_mut()
            .map(|r| r.take().unwrap_or(Err(RuntimeError::Shutdown)))
            .collect()
    }

    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut done = self.0.done.lock();
        while done.is_none() {
            if self.0.cv.wait_until(&mut done, deadline).timed_out() {
                return done.is_some();
            }
        }
        true
    }

    /// Submission to completion of the whole batch.
    pub fn latency(&self) -> Option<Duration> {
        self.0.done.lock().map(|t| t - self.0.submitted)
    }
}

#[derive(Default)]
struct Metrics {
    completed: AtomicU64,
    failed: AtomicU64,
    dependency_violations: AtomicU64,
    events: AtomicU64,
}

struct Partition {
    plan: Option<PlanId>,
    queues: Mutex<EventQueues<Event>>,
    cv: Condvar,
    parked: AtomicUsize,
    /// Workers asked to exit so they can be re-spawned elsewhere.
    retire: AtomicUsize,
    target: AtomicUsize,
    live: AtomicUsize,
    shutdown: AtomicBool,
    pools: Mutex<Vec<SharedPool>>,
}

impl Partition {
    fn new(plan: Option<PlanId>, config: &SchedulerConfig) -> Self {
        Partition {
            plan,
            queues: Mutex::new(EventQueues::new(config.policy, config.queue_bound)),
            cv: Condvar::new(),
            parked: AtomicUsize::new(0),
            retire: AtomicUsize::new(0),
            target: AtomicUsize::new(0),
            live: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
            pools: Mutex::new(Vec::new()),
        }
    }

    fn wake(&self) {
        if self.parked.load(Ordering::Acquire) > 0 {
            self.cv.notify_one();
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PartitionMetrics {
    pub plan: Option<PlanId>,
    pub workers: usize,
    pub queues: QueueStats,
    pub pool_growth: u64,
    pub pool_high_water: usize,
    pub pool_outstanding: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SchedulerMetrics {
    pub completed: u64,
    pub failed: u64,
    pub events: u64,
    pub dependency_violations: u64,
    pub partitions: Vec<PartitionMetrics>,
}

struct Inner {
    config: SchedulerConfig,
    env: Arc<ExecEnv>,
    shared: Arc<Partition>,
    reserved: RwLock<HashMap<PlanId, Arc<Partition>>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    metrics: Metrics,
    next_worker: AtomicUsize,
    cpus: usize,
    reserved_workers: AtomicUsize,
    /// Bumped whenever worker placement changes.
    placement_epoch: AtomicU64,
}

/// A fixed set of worker threads pulling stage events.
pub struct Scheduler {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").field("config", &self.inner.config).finish()
    }
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, env: Arc<ExecEnv>) -> Self {
        let workers = config.workers.max(1);
        let shared = Arc::new(Partition::new(None, &config));
        let inner = Arc::new(Inner {
            config,
            env,
            shared: shared.clone(),
            reserved: RwLock::new(HashMap::new()),
            handles: Mutex::new(Vec::new()),
            metrics: Metrics::default(),
            next_worker: AtomicUsize::new(0),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            reserved_workers: AtomicUsize::new(0),
            placement_epoch: AtomicU64::new(0),
        });
        for _ in 0..workers {
            spawn_worker(&inner, &shared, None);
        }
        Scheduler { inner }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.inner.config
    }

    /// Submits one instance per record. Records rejected by backpressure complete
    /// immediately with an error.
    pub fn submit(&self, plan: Arc<ResolvedPlan>, records: Vec<Record>) -> Result<BatchHandle, RuntimeError> {
        if records.is_empty() {
            return Err(RuntimeError::EmptyBatch);
        }
        let part = self.partition_for(plan.id);
        if part.shutdown.load(Ordering::Acquire) {
            return Err(RuntimeError::Shutdown);
        }
        let n = records.len();
        let batch = Arc::new(BatchState {
            results: Mutex::new((0..n).map(|_| None).collect()),
            remaining: AtomicUsize::new(n),
            done: Mutex::new(None),
            cv: Condvar::new(),
            submitted: Instant::now(),
        });
        let heads: SmallVec<[u16; 4]> = plan.heads().map(|h| h as u16).collect();
        for (i, record) in records.into_iter().enumerate() {
            let inst = Arc::new(Instance::new(plan.clone(), record, batch.clone(), i));
            inst.outstanding.store(heads.len() as u32, Ordering::Release);
            let pushed = {
                let mut q = part.queues.lock();
                q.push_heads(heads.iter().map(|h| Event {
                    inst: inst.clone(),
                    stage: *h,
                }))
            };
            match pushed {
                Ok(()) => {
                    for _ in 0..heads.len() {
                        part.wake();
                    }
                }
                Err(QueueFull) => {
                    inst.fail(RuntimeError::Backpressure);
                    inst.finish(&self.inner.metrics);
                }
            }
        }
        Ok(BatchHandle(batch))
    }

    fn partition_for(&self, plan: PlanId) -> Arc<Partition> {
        self.inner
            .reserved
            .read()
            .get(&plan)
            .cloned()
            .unwrap_or_else(|| self.inner.shared.clone())
    }

    /// Moves `cores` workers from the shared partition to one serving only `plan`, each
    /// with its own pool pre-filled for `vectors` instances.
    pub fn reserve(&self, plan: &ResolvedPlan, cores: usize, vectors: usize) -> Result<(), RuntimeError> {
        let shared = &self.inner.shared;
        let available = shared.target.load(Ordering::Acquire);
        if cores == 0 || cores >= available {
            return Err(RuntimeError::Capacity {
                requested: cores,
                available: available.saturating_sub(1),
            });
        }
        let mut reserved = self.inner.reserved.write();
        if reserved.contains_key(&plan.id) {
            return Err(RuntimeError::AlreadyReserved(plan.id));
        }
        shared.target.fetch_sub(cores, Ordering::AcqRel);
        shared.retire.fetch_add(cores, Ordering::AcqRel);
        shared.cv.notify_all();
        let part = Arc::new(Partition::new(Some(plan.id), &self.inner.config));
        let first = self.inner.reserved_workers.fetch_add(cores, Ordering::AcqRel);
        self.inner.placement_epoch.fetch_add(1, Ordering::AcqRel);
        for slot in first..first + cores {
            let pool = spawn_worker(&self.inner, &part, Some(slot));
            let mut p = pool.lock();
            for _ in 0..vectors {
                for cap in &plan.slot_caps {
                    p.reserve(*cap, 1);
                }
            }
        }
        reserved.insert(plan.id, part);
        Ok(())
    }

    pub fn reserved_workers(&self, plan: PlanId) -> usize {
        self.inner
            .reserved
            .read()
            .get(&plan)
            .map_or(0, |p| p.target.load(Ordering::Acquire))
    }

    pub fn shared_workers(&self) -> usize {
        self.inner.shared.target.load(Ordering::Acquire)
    }

    pub fn metrics(&self) -> SchedulerMetrics {
        let m = &self.inner.metrics;
        let mut parts = vec![self.inner.shared.clone()];
        parts.extend(self.inner.reserved.read().values().cloned());
        SchedulerMetrics {
            completed: m.completed.load(Ordering::Relaxed),
            failed: m.failed.load(Ordering::Relaxed),
            events: m.events.load(Ordering::Relaxed),
            dependency_violations: m.dependency_violations.load(Ordering::Relaxed),
            partitions: parts
                .iter()
                .map(|p| {
                    let pools: Vec<PoolStats> = p.pools.lock().iter().map(|x| x.lock().stats()).collect();
                    PartitionMetrics {
                        plan: p.plan,
                        workers: p.target.load(Ordering::Acquire),
                        queues: p.queues.lock().stats(),
                        pool_growth: pools.iter().map(|s| s.growth).sum(),
                        pool_high_water: pools.iter().map(|s| s.high_water).sum(),
                        pool_outstanding: pools.iter().map(|s| s.outstanding).sum(),
                    }
                })
                .collect(),
        }
    }

    /// Pool totals over every worker, including retired ones.
    pub fn pool_stats(&self) -> PoolStats {
        let mut parts = vec![self.inner.shared.clone()];
        parts.extend(self.inner.reserved.read().values().cloned());
        let mut total = PoolStats::default();
        for p in parts {
            for pool in p.pools.lock().iter() {
                let s = pool.lock().stats();
                total.growth += s.growth;
                total.acquired += s.acquired;
                total.released += s.released;
                total.outstanding += s.outstanding;
                total.high_water += s.high_water;
                total.pooled += s.pooled;
            }
        }
        total
    }

    /// Stops all workers, then fails every queued instance and returns its vectors.
    pub fn shutdown(&self) {
        let mut parts = vec![self.inner.shared.clone()];
        parts.extend(self.inner.reserved.read().values().cloned());
        for p in &parts {
            p.shutdown.store(true, Ordering::Release);
            let _g = p.queues.lock();
            p.cv.notify_all();
        }
        let handles: Vec<_> = self.inner.handles.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
        for p in &parts {
            let drained: Vec<Event> = p.queues.lock().drain().collect();
            for ev in drained {
                ev.inst.fail(RuntimeError::Shutdown);
                if ev.inst.outstanding.fetch_sub(1, Ordering::AcqRel) == 1 {
                    ev.inst.finish(&self.inner.metrics);
                }
            }
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_worker(inner: &Arc<Inner>, part: &Arc<Partition>, slot: Option<usize>) -> SharedPool {
    let pool: SharedPool = Arc::new(Mutex::new(VectorPool::new(inner.config.pooling)));
    part.pools.lock().push(pool.clone());
    part.target.fetch_add(1, Ordering::AcqRel);
    part.live.fetch_add(1, Ordering::AcqRel);
    let n = inner.next_worker.fetch_add(1, Ordering::Relaxed);
    let (inner2, part2, pool2) = (inner.clone(), part.clone(), pool.clone());
    let h = std::thread::Builder::new()
        .name(format!("stageserve-w{n}"))
        .spawn(move || worker_loop(&inner2, &part2, &pool2, slot))
        .expect("spawn worker");
    inner.handles.lock().push(h);
    pool
}

fn take_retirement(part: &Partition) -> bool {
    part.retire
        .fetch_update(Ordering::AcqRel, Ordering::Acquire, |r| r.checked_sub(1))
        .is_ok()
}

fn worker_loop(inner: &Inner, part: &Partition, pool: &SharedPool, slot: Option<usize>) {
    let mut ws = Workspace::new();
    let mut idle = 0u32;
    let mut placed = 0;
    loop {
        if part.shutdown.load(Ordering::Acquire) || take_retirement(part) {
            break;
        }
        let epoch = inner.placement_epoch.load(Ordering::Acquire);
        if epoch != placed {
            placed = epoch;
            if inner.config.isolate_reserved {
                let reserved = inner.reserved_workers.load(Ordering::Acquire);
                isolation::apply(&placement(inner.cpus, reserved, slot), inner.cpus);
            }
        }
        let next = part.queues.lock().pop();
        match next {
            Some((ev, _)) => {
                idle = 0;
                run_event(inner, part, pool, &mut ws, ev);
            }
            None if idle < inner.config.park_threshold => {
                idle += 1;
                std::thread::yield_now();
            }
            None => {
                let mut q = part.queues.lock();
                part.parked.fetch_add(1, Ordering::AcqRel);
                while q.is_empty() && !part.shutdown.load(Ordering::Acquire) && part.retire.load(Ordering::Acquire) == 0
                {
                    part.cv.wait(&mut q);
                }
                part.parked.fetch_sub(1, Ordering::AcqRel);
                idle = 0;
            }
        }
    }
    part.live.fetch_sub(1, Ordering::AcqRel);
}

fn run_event(inner: &Inner, part: &Partition, pool: &SharedPool, ws: &mut Workspace, ev: Event) {
    inner.metrics.events.fetch_add(1, Ordering::Relaxed);
    let inst = &ev.inst;
    let s = ev.stage as usize;
    let step = &inst.plan.steps[s];
    inst.ensure_vectors(pool);
    let done = inst.completed.load(Ordering::Acquire);
    if done & step.deps_mask != step.deps_mask {
        inner.metrics.dependency_violations.fetch_add(1, Ordering::Relaxed);
        inst.fail(RuntimeError::Internal(format!(
            "stage {s} dequeued before its dependencies"
        )));
    }
    if inst.failed.lock().is_none() {
        match run_step(&inner.env, inst, s, ws) {
            Ok(()) => {
                inst.completed.fetch_or(1 << s, Ordering::AcqRel);
                for c in &step.consumers {
                    if inst.pending[*c as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                        inst.outstanding.fetch_add(1, Ordering::AcqRel);
                        let pushed = part.queues.lock().push(
                            Event {
                                inst: ev.inst.clone(),
                                stage: *c,
                            },
                            Priority::High,
                        );
                        debug_assert!(pushed.is_ok());
                        part.wake();
                    }
                }
            }
            Err(e) => inst.fail(e),
        }
    }
    if inst.outstanding.fetch_sub(1, Ordering::AcqRel) == 1 {
        inst.finish(&inner.metrics);
    }
}

fn run_step(env: &ExecEnv, inst: &Instance, s: usize, ws: &mut Workspace) -> Result<(), RuntimeError> {
    let step = &inst.plan.steps[s];
    let record = inst.record.bind(&inst.plan.source_schema)?;
    let guards: SmallVec<[_; 4]> = step.inputs.iter().map(|i| inst.slots[*i as usize].read()).collect();
    let ins: SmallVec<[&DataVector; 4]> = guards.iter().map(|g| &**g).collect();
    let range = step.out_base as usize..(step.out_base + step.out_len) as usize;
    let mut outs: SmallVec<[DataVector; 4]> = inst.slots[range.clone()]
        .iter()
        .map(|v| std::mem::take(&mut *v.write()))
        .collect();
    let mut digest = *inst.digest.lock();
    let r = execute_step(env, step, &record, &mut digest, &ins, &mut outs, ws);
    for (slot, v) in inst.slots[range].iter().zip(outs) {
        *slot.write() = v;
    }
    if digest.is_some() {
        *inst.digest.lock() = digest;
    }
    r.map_err(RuntimeError::from)
}
