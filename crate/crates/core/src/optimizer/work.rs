use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ir::{DataType, NodeId, Schema, TrainingStats, TransformGraph, TransformKind, TransformNode};
use crate::ops::OpKind;
use crate::store::Checksum;

/// Operators of a plan: the IR kinds plus the two introduced by the optimizer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum PlanOp {
    Source {
        schema: Schema,
        separator: char,
    },
    Select {
        column: String,
    },
    Tokenize,
    CharNgram,
    WordNgram,
    Concat,
    NormalizeL2,
    PcaProject,
    KMeansFeaturize,
    TreeEnsemble,
    LinearBinaryClassifier,
    /// Dot product of the input with `weights[offset..offset + len]`, no bias.
    PartialDot {
        offset: usize,
        len: usize,
    },
    /// Sum of scalar inputs plus the linear model's bias.
    ScoreSum,
}

impl PlanOp {
    pub fn from_kind(kind: &TransformKind) -> Self {
        match kind {
            TransformKind::CsvSource { schema, separator } => PlanOp::Source {
                schema: schema.clone(),
                separator: *separator,
            },
            TransformKind::Select { column } => PlanOp::Select { column: column.clone() },
            TransformKind::Tokenize => PlanOp::Tokenize,
            TransformKind::CharNgram => PlanOp::CharNgram,
            TransformKind::WordNgram => PlanOp::WordNgram,
            TransformKind::Concat => PlanOp::Concat,
            TransformKind::NormalizeL2 => PlanOp::NormalizeL2,
            TransformKind::PcaProject => PlanOp::PcaProject,
            TransformKind::KMeansFeaturize => PlanOp::KMeansFeaturize,
            TransformKind::TreeEnsemble => PlanOp::TreeEnsemble,
            TransformKind::LinearBinaryClassifier => PlanOp::LinearBinaryClassifier,
        }
    }

    fn to_kind(&self) -> Option<TransformKind> {
        Some(match self {
            PlanOp::Source { schema, separator } => TransformKind::CsvSource {
                schema: schema.clone(),
                separator: *separator,
            },
            PlanOp::Select { column } => TransformKind::Select { column: column.clone() },
            PlanOp::Tokenize => TransformKind::Tokenize,
            PlanOp::CharNgram => TransformKind::CharNgram,
            PlanOp::WordNgram => TransformKind::WordNgram,
            PlanOp::Concat => TransformKind::Concat,
            PlanOp::NormalizeL2 => TransformKind::NormalizeL2,
            PlanOp::PcaProject => TransformKind::PcaProject,
            PlanOp::KMeansFeaturize => TransformKind::KMeansFeaturize,
            PlanOp::TreeEnsemble => TransformKind::TreeEnsemble,
            PlanOp::LinearBinaryClassifier => TransformKind::LinearBinaryClassifier,
            PlanOp::PartialDot { .. } | PlanOp::ScoreSum => return None,
        })
    }

    /// `None` for the source, which is not an operator.
    pub fn kind(&self) -> Option<OpKind> {
        Some(match self {
            PlanOp::Source { .. } => return None,
            PlanOp::Select { .. } => OpKind::Select,
            PlanOp::Tokenize => OpKind::Tokenize,
            PlanOp::CharNgram => OpKind::CharNgram,
            PlanOp::WordNgram => OpKind::WordNgram,
            PlanOp::Concat => OpKind::Concat,
            PlanOp::NormalizeL2 => OpKind::NormalizeL2,
            PlanOp::PcaProject => OpKind::PcaProject,
            PlanOp::KMeansFeaturize => OpKind::KMeansFeaturize,
            PlanOp::TreeEnsemble => OpKind::TreeEnsemble,
            PlanOp::LinearBinaryClassifier => OpKind::LinearBinaryClassifier,
            PlanOp::PartialDot { .. } => OpKind::PartialDot,
            PlanOp::ScoreSum => OpKind::ScoreSum,
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind().map_or("CsvSource", OpKind::name)
    }

    pub fn is_source(&self) -> bool {
        matches!(self, PlanOp::Source { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkNode {
    pub id: NodeId,
    pub op: PlanOp,
    pub params: Option<Checksum>,
    pub inputs: Vec<NodeId>,
    /// Statistics as authored, before defaults are filled in.
    pub declared: Option<TrainingStats>,
    pub schema: Option<Schema>,
    pub stats: Option<TrainingStats>,
    pub density_labeled: bool,
    pub vectorizable_labeled: bool,
}

impl WorkNode {
    pub(crate) fn to_transform(&self) -> Option<TransformNode> {
        Some(TransformNode {
            id: self.id,
            kind: self.op.to_kind()?,
            params: self.params,
            stats: self.declared,
            inputs: self.inputs.clone(),
        })
    }

    pub fn dtype(&self) -> Option<&DataType> {
        self.schema.as_ref().and_then(|s| {
            if s.len() == 1 {
                Some(&s.columns()[0].dtype)
            } else {
                None
            }
        })
    }

    /// Same computation: operator, parameters, authored statistics and inputs.
    pub(crate) fn same_computation(&self, other: &WorkNode) -> bool {
        self.op == other.op
            && self.params == other.params
            && self.declared == other.declared
            && self.inputs == other.inputs
    }
}

/// The graph the rewrite steps operate on: typed nodes plus a stage assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkGraph {
    pub(crate) nodes: BTreeMap<NodeId, WorkNode>,
    pub(crate) sink: NodeId,
    pub(crate) stages: BTreeMap<u32, Vec<NodeId>>,
    pub(crate) next_stage: u32,
    pub(crate) schema_checked: bool,
    pub(crate) graph_checked: bool,
    pub(crate) synthesized: BTreeSet<u32>,
    pub(crate) well_formed: bool,
}

impl WorkGraph {
    /// Untyped working copy of a transform graph.
    pub fn new(graph: &TransformGraph) -> Option<Self> {
        let sink = graph.sink()?;
        let nodes = graph
            .nodes()
            .map(|n| {
                (
                    n.id,
                    WorkNode {
                        id: n.id,
                        op: PlanOp::from_kind(&n.kind),
                        params: n.params,
                        inputs: n.inputs.clone(),
                        declared: n.stats,
                        schema: None,
                        stats: None,
                        density_labeled: false,
                        vectorizable_labeled: false,
                    },
                )
            })
            .collect();
        Some(WorkGraph {
            nodes,
            sink,
            stages: BTreeMap::new(),
            next_stage: 0,
            schema_checked: false,
            graph_checked: false,
            synthesized: BTreeSet::new(),
            well_formed: false,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &WorkNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&WorkNode> {
        self.nodes.get(&id)
    }

    pub fn sink(&self) -> NodeId {
        self.sink
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Stages in id order, each as its node list.
    pub fn stages(&self) -> impl Iterator<Item = (u32, &[NodeId])> {
        self.stages.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub(crate) fn next_node_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |n| n.0 + 1))
    }

    pub(crate) fn consumers(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(move |n| n.inputs.contains(&id))
            .map(|n| n.id)
    }

    pub(crate) fn stage_of(&self, id: NodeId) -> Option<u32> {
        self.stages.iter().find(|(_, ns)| ns.contains(&id)).map(|(s, _)| *s)
    }

    pub(crate) fn node_stage_map(&self) -> BTreeMap<NodeId, u32> {
        self.stages
            .iter()
            .flat_map(|(s, ns)| ns.iter().map(move |n| (*n, *s)))
            .collect()
    }

    /// Stages whose nodes feed stage `s`.
    pub(crate) fn stage_deps(&self, s: u32) -> BTreeSet<u32> {
        let map = self.node_stage_map();
        let mut deps = BTreeSet::new();
        for n in &self.stages[&s] {
            for i in &self.nodes[n].inputs {
                if let Some(&t) = map.get(i) {
                    if t != s {
                        deps.insert(t);
                    }
                }
            }
        }
        deps
    }

    pub(crate) fn stage_consumers(&self, s: u32) -> BTreeSet<u32> {
        self.stages
            .keys()
            .copied()
            .filter(|&t| t != s && self.stage_deps(t).contains(&s))
            .collect()
    }

    /// Whether `to` is reachable from `from` through some stage other than a direct edge.
    pub(crate) fn has_indirect_path(&self, from: u32, to: u32) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<u32> = self.stage_consumers(from).into_iter().filter(|&x| x != to).collect();
        while let Some(x) = queue.pop_front() {
            if x == to {
                return true;
            }
            if seen.insert(x) {
                queue.extend(self.stage_consumers(x));
            }
        }
        false
    }

    /// Rewires every use of `old` to `new`.
    pub(crate) fn replace_uses(&mut self, old: NodeId, new: NodeId) {
        for n in self.nodes.values_mut() {
            for i in n.inputs.iter_mut() {
                if *i == old {
                    *i = new;
                }
            }
        }
        if self.sink == old {
            self.sink = new;
        }
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) {
        self.nodes.remove(&id);
        for ns in self.stages.values_mut() {
            ns.retain(|n| *n != id);
        }
    }

    /// One line per stage: id, operator kinds, dependencies.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (s, ns) in &self.stages {
            let kinds: Vec<&str> = ns.iter().map(|n| self.nodes[n].op.name()).collect();
            let deps: Vec<String> = self.stage_deps(*s).iter().map(|d| format!("s{d}")).collect();
            let _ = writeln!(out, "s{s} [{}] deps=[{}]", kinds.join(" "), deps.join(","));
        }
        out
    }
}
