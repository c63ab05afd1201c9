use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::ir::{Column, DataType, Density, NodeId, Schema, TrainingStats};
use crate::ops::{registry, Loc, Mode, OpDesc, OpKind, Signature, StageDescriptor};
use crate::runtime::PlanId;
use crate::store::{Checksum, Digester};

use super::rules::topo_order;
use super::work::{PlanOp, WorkGraph};
use super::OptimizeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageId(pub u32);

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub op: PlanOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Checksum>,
    pub inputs: Vec<NodeId>,
    pub dtype: DataType,
    pub stats: TrainingStats,
}

impl PlanNode {
    /// Selections and the source are read straight from the request record.
    pub fn is_record_alias(&self) -> bool {
        matches!(self.op, PlanOp::Select { .. } | PlanOp::Source { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicalStage {
    pub id: StageId,
    pub transforms: Vec<PlanNode>,
    pub input_schema: Schema,
    pub output_schema: Schema,
    pub deps: Vec<StageId>,
    pub param_refs: BTreeSet<Checksum>,
    /// Largest vector bound in the stage; sparse if any output is; vectorizable if any op is.
    pub stats: TrainingStats,
    /// Values produced upstream, in order of first use.
    pub inputs: Vec<NodeId>,
    /// Values read by later stages, or the plan's result.
    pub outputs: Vec<NodeId>,
}

impl LogicalStage {
    pub fn kinds(&self) -> Vec<&'static str> {
        self.transforms.iter().map(|n| n.op.name()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageGraph {
    /// Topologically ordered; a stage's index equals its id.
    pub stages: Vec<LogicalStage>,
    pub sink: StageId,
    pub sink_node: NodeId,
    pub source: NodeId,
    pub source_schema: Schema,
}

impl StageGraph {
    pub fn stage(&self, id: StageId) -> &LogicalStage {
        &self.stages[id.0 as usize]
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            let deps: Vec<String> = s.deps.iter().map(StageId::to_string).collect();
            let _ = writeln!(out, "{} [{}] deps=[{}]", s.id, s.kinds().join(" "), deps.join(","));
        }
        out
    }

    fn node(&self, id: NodeId) -> Option<&PlanNode> {
        self.stages.iter().flat_map(|s| &s.transforms).find(|n| n.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorKind {
    Linear,
    Tree,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineHint {
    #[default]
    RequestResponse,
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalStageBinding {
    pub logical: StageId,
    /// Kernel keys of the stage's operators joined by `>`.
    pub impl_key: String,
    pub descriptor: StageDescriptor,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    /// The signature each kernel was selected by, in op order.
    pub selected_by: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<PlanId>,
    pub logical: StageGraph,
    pub bindings: Vec<PhysicalStageBinding>,
    pub param_refs: BTreeSet<Checksum>,
    pub max_vector_budget: usize,
    #[serde(default)]
    pub engine_hint: EngineHint,
    pub source_schema: Schema,
    pub predictor: PredictorKind,
    /// Content hash of the logical and physical plan.
    pub digest: Checksum,
}

impl ModelPlan {
    pub fn stage_count(&self) -> usize {
        self.logical.stages.len()
    }

    pub fn dump(&self) -> String {
        self.logical.dump()
    }
}

fn merged_stats(nodes: &[PlanNode]) -> TrainingStats {
    let mut s = TrainingStats::new(0, Density::Dense, false);
    for n in nodes {
        s.max_vector_size = s.max_vector_size.max(n.stats.max_vector_size);
        if matches!(
            n.dtype,
            DataType::Vector {
                density: Density::Sparse,
                ..
            }
        ) {
            s.density = Density::Sparse;
        }
        s.vectorizable |= n.stats.vectorizable;
    }
    s
}

/// Builds the final stage graph, renumbering stages in topological order.
pub(crate) fn finalize(g: &WorkGraph) -> Result<StageGraph, OptimizeError> {
    let malformed = |detail: String| OptimizeError::Malformed {
        rule: "well-formedness",
        detail,
    };
    let order = topo_order(g).ok_or_else(|| malformed("stage graph has a cycle".into()))?;
    let renumber: BTreeMap<u32, StageId> = order.iter().enumerate().map(|(i, s)| (*s, StageId(i as u32))).collect();
    let source = g
        .nodes
        .values()
        .find(|n| n.op.is_source())
        .ok_or_else(|| malformed("no source".into()))?;
    let PlanOp::Source {
        schema: source_schema, ..
    } = &source.op
    else {
        unreachable!()
    };
    let map = g.node_stage_map();
    let plan_node = |id: &NodeId| -> Result<PlanNode, OptimizeError> {
        let n = &g.nodes[id];
        Ok(PlanNode {
            id: n.id,
            op: n.op.clone(),
            params: n.params,
            inputs: n.inputs.clone(),
            dtype: n
                .dtype()
                .cloned()
                .ok_or_else(|| malformed(format!("{} has no single-column schema", n.id)))?,
            stats: n.stats.ok_or_else(|| malformed(format!("{} has no stats", n.id)))?,
        })
    };
    let alias = |id: &NodeId| matches!(g.nodes[id].op, PlanOp::Select { .. } | PlanOp::Source { .. });

    let mut stages = Vec::with_capacity(order.len());
    for old in &order {
        let ids = &g.stages[old];
        let transforms = ids.iter().map(plan_node).collect::<Result<Vec<_>, _>>()?;
        let mut inputs = Vec::new();
        let mut record_cols = BTreeSet::new();
        for n in transforms.iter().filter(|n| !n.is_record_alias()) {
            for i in &n.inputs {
                if alias(i) {
                    match &g.nodes[i].op {
                        PlanOp::Select { column } => record_cols.insert(column.clone()),
                        _ => record_cols.insert(source_schema.columns()[0].name.clone()),
                    };
                } else if map.get(i) != Some(old) && !inputs.contains(i) {
                    inputs.push(*i);
                }
            }
        }
        let outputs: Vec<NodeId> = transforms
            .iter()
            .filter(|n| !n.is_record_alias())
            .filter(|n| n.id == g.sink || g.consumers(n.id).any(|c| map.get(&c) != Some(old)))
            .map(|n| n.id)
            .collect();
        let mut in_cols: Vec<Column> = source_schema
            .columns()
            .iter()
            .filter(|c| record_cols.contains(&c.name))
            .cloned()
            .collect();
        for i in &inputs {
            in_cols.push(Column::new(
                i.to_string(),
                g.nodes[i].dtype().cloned().unwrap_or(DataType::Scalar),
            ));
        }
        let out_cols = outputs
            .iter()
            .map(|o| Column::new(o.to_string(), g.nodes[o].dtype().cloned().unwrap_or(DataType::Scalar)))
            .collect();
        let deps: BTreeSet<StageId> = g.stage_deps(*old).iter().map(|d| renumber[d]).collect();
        stages.push(LogicalStage {
            id: renumber[old],
            param_refs: transforms.iter().filter_map(|n| n.params).collect(),
            stats: merged_stats(&transforms),
            transforms,
            input_schema: Schema::new(in_cols).map_err(|e| malformed(e.to_string()))?,
            output_schema: Schema::new(out_cols).map_err(|e| malformed(e.to_string()))?,
            deps: deps.into_iter().collect(),
            inputs,
            outputs,
        });
    }
    let sink = map
        .get(&g.sink)
        .map(|s| renumber[s])
        .ok_or_else(|| malformed("sink is not staged".into()))?;
    Ok(StageGraph {
        stages,
        sink,
        sink_node: g.sink,
        source: source.id,
        source_schema: source_schema.clone(),
    })
}

fn capacity(dtype: &DataType, bound: usize) -> usize {
    match dtype {
        // Spans are stored as (start, end) pairs.
        DataType::Tokens => 2 * bound.max(1),
        DataType::Vector { .. } => bound.max(1),
        DataType::Text | DataType::Scalar => 1,
    }
}

fn density_of(dtype: &DataType) -> Option<Density> {
    match dtype {
        DataType::Vector { density, .. } => Some(*density),
        _ => None,
    }
}

/// Selects a kernel for every operator and lays out each stage's buffers.
pub fn compile_to_physical(sg: &StageGraph) -> Result<Vec<PhysicalStageBinding>, OptimizeError> {
    let alias_loc = |id: NodeId| -> Option<Loc> {
        if id == sg.source {
            return Some(Loc::Record(0));
        }
        match sg.node(id).map(|n| &n.op) {
            Some(PlanOp::Select { column }) => sg.source_schema.column(column).map(|(i, _)| Loc::Record(i as u16)),
            _ => None,
        }
    };
    let dtype_of = |id: NodeId| -> Option<DataType> {
        if id == sg.source {
            return sg.source_schema.columns().first().map(|c| c.dtype.clone());
        }
        sg.node(id).map(|n| n.dtype.clone())
    };
    // Record column backing each token sequence.
    let mut text_of: BTreeMap<NodeId, u16> = BTreeMap::new();
    let mut bindings = Vec::with_capacity(sg.stages.len());
    for stage in &sg.stages {
        let mut ops = Vec::new();
        let mut keys = Vec::new();
        let mut selected_by = Vec::new();
        let mut locs: BTreeMap<NodeId, Loc> = BTreeMap::new();
        let (mut temps, mut outputs) = (Vec::new(), vec![0; stage.outputs.len()]);
        for n in &stage.transforms {
            if n.is_record_alias() {
                if let PlanOp::Select { .. } = n.op {
                    keys.push("select".to_string());
                    selected_by.push(
                        Signature {
                            kind: OpKind::Select,
                            density: density_of(&n.dtype),
                            mode: Mode::Fused,
                        }
                        .to_string(),
                    );
                }
                continue;
            }
            let kind = n.op.kind().expect("not a source");
            let mut inputs = Vec::with_capacity(n.inputs.len());
            let mut text = None;
            for i in &n.inputs {
                let loc = if let Some(l) = alias_loc(*i) {
                    if matches!(dtype_of(*i), Some(DataType::Text)) {
                        if let Loc::Record(c) = l {
                            text = Some(c);
                        }
                    }
                    l
                } else if let Some(l) = locs.get(i) {
                    *l
                } else if let Some(k) = stage.inputs.iter().position(|x| x == i) {
                    Loc::Input(k as u16)
                } else {
                    return Err(OptimizeError::Malformed {
                        rule: "compile",
                        detail: format!("{}: {} reads unknown value {i}", stage.id, n.id),
                    });
                };
                if let Some(c) = text_of.get(i) {
                    text = Some(*c);
                }
                inputs.push(loc);
            }
            if kind == OpKind::Tokenize {
                if let Some(c) = text {
                    text_of.insert(n.id, c);
                }
            }
            let bound = n.stats.max_vector_size.max(1);
            let cap = capacity(&n.dtype, bound);
            let out = match stage.outputs.iter().position(|o| *o == n.id) {
                Some(k) => {
                    outputs[k] = cap;
                    Loc::Output(k as u16)
                }
                None => {
                    temps.push(cap);
                    Loc::Temp(temps.len() as u16 - 1)
                }
            };
            locs.insert(n.id, out);

            let in_types: Vec<Option<DataType>> = n.inputs.iter().map(|i| dtype_of(*i)).collect();
            let density = match kind {
                OpKind::Concat => {
                    let all_dense = in_types.iter().all(|t| {
                        matches!(
                            t,
                            Some(DataType::Vector {
                                density: Density::Dense,
                                ..
                            })
                        )
                    });
                    Some(if all_dense { Density::Dense } else { Density::Sparse })
                }
                _ => in_types.first().and_then(|t| t.as_ref()).and_then(density_of),
            };
            let mode = if kind.is_compute_bound() {
                Mode::Compute {
                    vectorizable: n.stats.vectorizable,
                }
            } else {
                Mode::Fused
            };
            let sig = Signature { kind, density, mode };
            let entry = registry::lookup(sig)?;
            let (offset, len) = match n.op {
                PlanOp::PartialDot { offset, len } => (offset, len),
                _ => (0, 0),
            };
            keys.push(entry.key.to_string());
            selected_by.push(sig.to_string());
            ops.push(OpDesc {
                node: n.id.0,
                key: entry.key.to_string(),
                kind,
                params: n.params,
                inputs,
                out,
                text: if matches!(n.dtype, DataType::Tokens)
                    || in_types.iter().any(|t| matches!(t, Some(DataType::Tokens)))
                {
                    text
                } else {
                    None
                },
                offset,
                len,
                bound: match n.dtype {
                    DataType::Scalar => 1,
                    _ => bound,
                },
            });
        }
        let prefix = if stage.inputs.is_empty() {
            ops.iter().take_while(|o| o.kind.is_featurizer()).count()
        } else {
            0
        };
        let mut prefix_live: Vec<Loc> = Vec::new();
        for o in &ops[..prefix] {
            let read_later = ops[prefix..].iter().any(|l| l.inputs.contains(&o.out));
            if (matches!(o.out, Loc::Output(_)) || read_later) && !prefix_live.contains(&o.out) {
                prefix_live.push(o.out);
            }
        }
        bindings.push(PhysicalStageBinding {
            logical: stage.id,
            impl_key: keys.join(">"),
            descriptor: StageDescriptor {
                ops,
                inputs: stage.inputs.len(),
                outputs,
                temps,
                prefix,
                prefix_live,
            },
            inputs: stage.inputs.clone(),
            outputs: stage.outputs.clone(),
            selected_by,
        });
    }
    Ok(bindings)
}

/// Assembles the plan from a finalized stage graph.
pub(crate) fn assemble(sg: StageGraph, predictor: PredictorKind) -> Result<ModelPlan, OptimizeError> {
    let bindings = compile_to_physical(&sg)?;
    let param_refs = sg.stages.iter().flat_map(|s| s.param_refs.iter().copied()).collect();
    let max_vector_budget = sg.stages.iter().map(|s| s.stats.max_vector_size).max().unwrap_or(0);
    let mut d = Digester::default();
    d.update(&serde_json::to_vec(&sg).expect("plan serializes"));
    d.update(&serde_json::to_vec(&bindings).expect("plan serializes"));
    Ok(ModelPlan {
        plan_id: None,
        source_schema: sg.source_schema.clone(),
        logical: sg,
        bindings,
        param_refs,
        max_vector_budget,
        engine_hint: EngineHint::default(),
        predictor,
        digest: d.finish(),
    })
}
