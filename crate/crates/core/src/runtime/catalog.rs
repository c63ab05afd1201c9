use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::ir::{NodeId, Schema};
use crate::ops::{KernelError, PhysicalStage, StageDescriptor};
use crate::optimizer::{EngineHint, ModelPlan, PredictorKind};
use crate::store::{Checksum, ObjectStore};

use super::metrics::LatencyHistogram;
use super::{PlanId, RuntimeError};

/// A cacheable stage prefix and how many registered plans share it.
#[derive(Debug)]
pub struct PrefixEntry {
    pub id: u64,
    plans: AtomicUsize,
}

impl PrefixEntry {
    pub fn plans(&self) -> usize {
        self.plans.load(Ordering::Relaxed)
    }
}

/// One stage of a resolved plan: the shared physical stage plus slot wiring.
#[derive(Debug)]
pub struct ResolvedStep {
    pub stage: Arc<PhysicalStage>,
    /// Slot of each upstream input, in stage input order.
    pub inputs: SmallVec<[u16; 4]>,
    /// Outputs occupy `out_base .. out_base + out_len`.
    pub out_base: u16,
    pub out_len: u16,
    pub prefix: Option<Arc<PrefixEntry>>,
    /// Bit `d` set when step `d` must complete first.
    pub deps_mask: u64,
    pub consumers: SmallVec<[u16; 4]>,
}

/// A plan as a flat array of steps over pre-sized slots.
#[derive(Debug)]
pub struct ResolvedPlan {
    pub id: PlanId,
    pub steps: Vec<ResolvedStep>,
    pub slot_caps: Vec<usize>,
    pub sink_slot: u16,
    pub predictor: PredictorKind,
    pub source_schema: Schema,
    pub metrics: Arc<LatencyHistogram>,
}

impl ResolvedPlan {
    pub fn heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.deps_mask == 0)
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegisterOptions {
    pub engine_hint: Option<EngineHint>,
    /// Workers dedicated to this plan.
    pub reservation: Option<usize>,
}

#[derive(Debug)]
pub(crate) struct PlanEntry {
    pub plan: Arc<ModelPlan>,
    pub engine: EngineHint,
    pub resolved: Option<Arc<ResolvedPlan>>,
    pub metrics: Arc<LatencyHistogram>,
    pub prefixes: Vec<Option<Arc<PrefixEntry>>>,
}

/// Registered plans and the physical stages they share.
#[derive(Debug, Default)]
pub struct Catalog {
    stages: HashMap<StageDescriptor, Arc<PhysicalStage>>,
    prefixes: HashMap<StageDescriptor, Arc<PrefixEntry>>,
    pub(crate) plans: BTreeMap<PlanId, PlanEntry>,
    by_digest: HashMap<Checksum, PlanId>,
    log: Vec<PlanId>,
}

impl Catalog {
    pub fn stage_instances(&self) -> usize {
        self.stages.len()
    }

    pub fn plan_count(&self) -> usize {
        self.plans.len()
    }

    pub fn plan_ids(&self) -> &[PlanId] {
        &self.log
    }

    pub fn plan(&self, id: PlanId) -> Option<&Arc<ModelPlan>> {
        self.plans.get(&id).map(|e| &e.plan)
    }

    /// Total stages over all plans, counting shared ones once per plan.
    pub fn plan_stage_total(&self) -> usize {
        self.plans.values().map(|e| e.plan.bindings.len()).sum()
    }

    pub fn shared_prefixes(&self) -> usize {
        self.prefixes.values().filter(|p| p.plans() >= 2).count()
    }

    /// Whether any stage of `id` has a cacheable prefix shared with another plan.
    pub fn has_shared_prefix(&self, id: PlanId) -> bool {
        self.plans
            .get(&id)
            .is_some_and(|e| e.prefixes.iter().flatten().any(|p| p.plans() >= 2))
    }

    pub(crate) fn find(&self, digest: &Checksum) -> Option<PlanId> {
        self.by_digest.get(digest).copied()
    }

    pub(crate) fn insert(&mut self, plan: Arc<ModelPlan>, engine: EngineHint) -> PlanId {
        let id = PlanId(self.log.len() as u32);
        let prefixes = plan
            .bindings
            .iter()
            .map(|b| {
                b.descriptor.prefix_descriptor().map(|d| {
                    let next = self.prefixes.len() as u64;
                    let e = self.prefixes.entry(d).or_insert_with(|| {
                        Arc::new(PrefixEntry {
                            id: next,
                            plans: AtomicUsize::new(0),
                        })
                    });
                    e.plans.fetch_add(1, Ordering::Relaxed);
                    e.clone()
                })
            })
            .collect();
        self.by_digest.insert(plan.digest, id);
        self.log.push(id);
        self.plans.insert(
            id,
            PlanEntry {
                plan,
                engine,
                resolved: None,
                metrics: Arc::default(),
                prefixes,
            },
        );
        id
    }

    /// Instantiates (or reuses) every stage of `id` and wires slots.
    pub(crate) fn resolve(&mut self, id: PlanId, store: &ObjectStore) -> Result<ResolvedPlan, RuntimeError> {
        let entry = self.plans.get(&id).ok_or(RuntimeError::UnknownPlan(id))?;
        let plan = entry.plan.clone();
        let prefixes = entry.prefixes.clone();
        let metrics = entry.metrics.clone();
        let mut stages = Vec::with_capacity(plan.bindings.len());
        for b in &plan.bindings {
            let stage = match self.stages.get(&b.descriptor) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(PhysicalStage::instantiate(&b.impl_key, &b.descriptor, store)?);
                    self.stages.insert(b.descriptor.clone(), s.clone());
                    s
                }
            };
            stages.push(stage);
        }
        Ok(wire(id, &plan, stages, prefixes, metrics)?)
    }

    /// Resolution against already-instantiated stages only; `None` if any is missing.
    pub(crate) fn resolve_cached(&self, id: PlanId) -> Option<Result<ResolvedPlan, RuntimeError>> {
        let entry = self.plans.get(&id)?;
        let stages = entry
            .plan
            .bindings
            .iter()
            .map(|b| self.stages.get(&b.descriptor).cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(wire(id, &entry.plan, stages, entry.prefixes.clone(), entry.metrics.clone()).map_err(Into::into))
    }
}

fn wire(
    id: PlanId,
    plan: &ModelPlan,
    stages: Vec<Arc<PhysicalStage>>,
    prefixes: Vec<Option<Arc<PrefixEntry>>>,
    metrics: Arc<LatencyHistogram>,
) -> Result<ResolvedPlan, KernelError> {
    if plan.bindings.len() > 64 {
        return Err(KernelError::Unregistered(format!(
            "plan with {} stages",
            plan.bindings.len()
        )));
    }
    let mut slot_of: HashMap<NodeId, u16> = HashMap::new();
    let mut producer: HashMap<NodeId, usize> = HashMap::new();
    let mut slot_caps = Vec::new();
    for (i, b) in plan.bindings.iter().enumerate() {
        for (k, o) in b.outputs.iter().enumerate() {
            slot_of.insert(*o, slot_caps.len() as u16);
            producer.insert(*o, i);
            slot_caps.push(b.descriptor.outputs[k]);
        }
    }
    let mut steps = Vec::with_capacity(stages.len());
    let mut base = 0u16;
    for ((b, stage), prefix) in plan.bindings.iter().zip(stages).zip(prefixes) {
        let mut deps_mask = 0u64;
        let mut inputs = SmallVec::new();
        for i in &b.inputs {
            let slot = *slot_of.get(i).ok_or(KernelError::BadLoc { node: i.0 })?;
            inputs.push(slot);
            deps_mask |= 1 << producer[i];
        }
        steps.push(ResolvedStep {
            stage,
            inputs,
            out_base: base,
            out_len: b.outputs.len() as u16,
            prefix,
            deps_mask,
            consumers: SmallVec::new(),
        });
        base += b.outputs.len() as u16;
    }
    for i in 0..steps.len() {
        for d in 0..steps.len() {
            if steps[i].deps_mask & (1 << d) != 0 {
                steps[d].consumers.push(i as u16);
            }
        }
    }
    let sink_slot = *slot_of.get(&plan.logical.sink_node).ok_or(KernelError::BadLoc {
        node: plan.logical.sink_node.0,
    })?;
    Ok(ResolvedPlan {
        id,
        steps,
        slot_caps,
        sink_slot,
        predictor: plan.predictor,
        source_schema: plan.source_schema.clone(),
        metrics,
    })
}
