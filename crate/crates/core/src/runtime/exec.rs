use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::ops::{sigmoid, DataVector, Input, KernelError, Workspace};
use crate::optimizer::PredictorKind;
use crate::store::{CacheKey, CachedOutputs, Checksum, ObjectStore};

use super::catalog::{ResolvedPlan, ResolvedStep};
use super::pool::VectorPool;
use super::record::digest_inputs;
use super::{PlanId, Prediction, RuntimeError};

/// What every engine needs to run a stage.
pub struct ExecEnv {
    pub store: Arc<ObjectStore>,
    pub materialize: AtomicBool,
    pub pooling: bool,
}

impl std::fmt::Debug for ExecEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecEnv")
            .field("materialize", &self.materialize())
            .field("pooling", &self.pooling)
            .finish()
    }
}

impl ExecEnv {
    pub fn materialize(&self) -> bool {
        self.materialize.load(Ordering::Relaxed)
    }
}

/// Runs one step, serving its featurization prefix from the materialization cache when
/// at least two plans share it. `digest` is filled lazily from `record`.
pub fn execute_step(
    env: &ExecEnv,
    step: &ResolvedStep,
    record: &[Input<'_>],
    digest: &mut Option<Checksum>,
    inputs: &[&DataVector],
    outputs: &mut [DataVector],
    ws: &mut Workspace,
) -> Result<(), KernelError> {
    let shared_prefix = step.prefix.as_ref().filter(|p| p.plans() >= 2);
    let Some(prefix) = shared_prefix.filter(|_| env.materialize()) else {
        return step.stage.execute(record, inputs, outputs, ws, 0);
    };
    let key = CacheKey {
        stage: prefix.id,
        input: *digest.get_or_insert_with(|| digest_inputs(record)),
    };
    let cache = env.store.materialization();
    let from = step.stage.descriptor().prefix;
    if let Some(hit) = cache.lookup(&key) {
        step.stage.restore(&hit.vectors, outputs, ws);
        return step.stage.execute(record, inputs, outputs, ws, from);
    }
    step.stage.execute(record, inputs, outputs, ws, 0)?;
    cache.insert(
        key,
        CachedOutputs {
            vectors: step.stage.capture(outputs, ws),
        },
    );
    Ok(())
}

pub fn to_prediction(kind: PredictorKind, v: &DataVector) -> Result<Prediction, RuntimeError> {
    let score = v.as_scalar().ok_or(RuntimeError::NotScalar)?;
    Ok(Prediction {
        score,
        probability: match kind {
            PredictorKind::Linear => Some(sigmoid(score)),
            PredictorKind::Tree => None,
        },
    })
}

/// Per-thread execution state for the request-response engine.
#[derive(Debug)]
pub struct WorkerContext {
    pub pool: VectorPool,
    pub ws: Workspace,
    slots: Vec<DataVector>,
    warmed: HashSet<PlanId>,
}

impl WorkerContext {
    pub fn new(pooling: bool) -> Self {
        WorkerContext {
            pool: VectorPool::new(pooling),
            ws: Workspace::new(),
            slots: Vec::new(),
            warmed: HashSet::new(),
        }
    }

    /// Sizes workspace and pool for `plan` so steady-state runs do not allocate.
    pub fn prewarm(&mut self, plan: &ResolvedPlan) {
        if self.warmed.contains(&plan.id) {
            return;
        }
        for s in &plan.steps {
            s.stage.prewarm(&mut self.ws);
        }
        if self.pool.enabled() {
            let vs: Vec<DataVector> = plan.slot_caps.iter().map(|c| self.pool.acquire(*c)).collect();
            for v in vs {
                self.pool.release(v);
            }
        }
        self.slots.reserve(plan.slot_caps.len());
        self.warmed.insert(plan.id);
    }

    /// Runs the whole plan inline on the calling thread.
    pub fn run(
        &mut self,
        env: &ExecEnv,
        plan: &ResolvedPlan,
        record: &[Input<'_>],
    ) -> Result<Prediction, RuntimeError> {
        self.prewarm(plan);
        for cap in &plan.slot_caps {
            let v = self.pool.acquire(*cap);
            self.slots.push(v);
        }
        let result = self.run_steps(env, plan, record);
        for v in self.slots.drain(..) {
            self.pool.release(v);
        }
        result
    }

    fn run_steps(
        &mut self,
        env: &ExecEnv,
        plan: &ResolvedPlan,
        record: &[Input<'_>],
    ) -> Result<Prediction, RuntimeError> {
        let mut digest = None;
        for step in &plan.steps {
            let base = step.out_base as usize;
            let (before, after) = self.slots.split_at_mut(base);
            let outs = &mut after[..step.out_len as usize];
            let ins: SmallVec<[&DataVector; 4]> = step.inputs.iter().map(|i| &before[*i as usize]).collect();
            execute_step(env, step, record, &mut digest, &ins, outs, &mut self.ws)?;
        }
        to_prediction(plan.predictor, &self.slots[plan.sink_slot as usize])
    }
}
