//! Rewrite rules, grouped by step. Each rule applies at most one rewrite per call, at
//! the smallest node or stage id where it matches, and reports where it fired.

use std::collections::BTreeSet;

use crate::ir::{self, DataType, Density, IrError, NodeId, Schema, TrainingStats};
use crate::ops::OpKind;
use crate::params::ParamView;
use crate::store::ObjectStore;

use super::work::{PlanOp, WorkGraph, WorkNode};
use super::OptimizeError;

pub(crate) type RuleFn = fn(&mut WorkGraph, &ObjectStore) -> Result<Option<String>, OptimizeError>;

pub(crate) struct Rule {
    pub name: &'static str,
    pub apply: RuleFn,
}

fn validation(rule: &'static str, source: IrError) -> OptimizeError {
    OptimizeError::Validation { rule, source }
}

// ---- InputGraphValidator -------------------------------------------------------------

pub(crate) const INPUT_RULES: &[Rule] = &[
    Rule {
        name: "schema-propagation",
        apply: schema_propagation,
    },
    Rule {
        name: "schema-validation",
        apply: schema_validation,
    },
    Rule {
        name: "graph-validation",
        apply: graph_validation,
    },
];

fn is_type_error(e: &IrError) -> bool {
    matches!(
        e,
        IrError::TypeMismatch { .. }
            | IrError::DimensionMismatch { .. }
            | IrError::UnknownColumn { .. }
            | IrError::EmptyDictionary { .. }
            | IrError::StatsTooSmall { .. }
            | IrError::WrongParams { .. }
    )
}

/// Types the smallest untyped node whose inputs are all typed.
fn schema_propagation(g: &mut WorkGraph, store: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let ready = g.nodes.values().find(|n| {
        n.schema.is_none()
            && n.inputs
                .iter()
                .all(|i| g.nodes.get(i).is_some_and(|p| p.schema.is_some()))
    });
    let Some(node) = ready else { return Ok(None) };
    let id = node.id;
    let Some(tnode) = node.to_transform() else {
        return Err(OptimizeError::Malformed {
            rule: "schema-propagation",
            detail: format!("{id} is not an input-graph operator"),
        });
    };
    let inputs: Vec<&Schema> = node
        .inputs
        .iter()
        .map(|i| g.nodes[i].schema.as_ref().expect("ready"))
        .collect();
    let (schema, stats) = ir::infer_output(&tnode, &inputs, store).map_err(|e| {
        let rule = if is_type_error(&e) {
            "schema-validation"
        } else {
            "schema-propagation"
        };
        validation(rule, e)
    })?;
    let n = g.nodes.get_mut(&id).expect("exists");
    n.schema = Some(schema);
    n.stats = Some(stats);
    Ok(Some(id.to_string()))
}

/// Record columns must be something a request can carry.
fn schema_validation(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    if g.schema_checked {
        return Ok(None);
    }
    for n in g.nodes.values() {
        if let PlanOp::Source { schema, .. } = &n.op {
            if schema.is_empty() {
                return Err(validation(
                    "schema-validation",
                    IrError::TypeMismatch {
                        node: n.id,
                        kind: "CsvSource",
                        expected: "at least one column",
                        found: "empty schema".into(),
                    },
                ));
            }
            if let Some(c) = schema.columns().iter().find(|c| c.dtype == DataType::Tokens) {
                return Err(validation(
                    "schema-validation",
                    IrError::TypeMismatch {
                        node: n.id,
                        kind: "CsvSource",
                        expected: "Text, Float-scalar or Float-vector column",
                        found: format!("{} for column `{}`", c.dtype, c.name),
                    },
                ));
            }
        }
    }
    g.schema_checked = true;
    Ok(Some("source".into()))
}

/// Runs once propagation stalls: single source, acyclic, final predictor at the sink.
fn graph_validation(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    if g.graph_checked {
        return Ok(None);
    }
    let rule = "graph-validation";
    if g.nodes.is_empty() {
        return Err(validation(rule, IrError::EmptyGraph));
    }
    let sources = g.nodes.values().filter(|n| n.op.is_source()).count();
    if sources != 1 {
        return Err(validation(rule, IrError::SourceCount(sources)));
    }
    if let Some(n) = g.nodes.values().find(|n| n.schema.is_none()) {
        return Err(validation(rule, IrError::Cycle(n.id)));
    }
    let sink_ok = g
        .nodes
        .get(&g.sink)
        .and_then(|n| n.op.kind())
        .is_some_and(|k| matches!(k, OpKind::LinearBinaryClassifier | OpKind::TreeEnsemble));
    if !sink_ok {
        return Err(validation(
            rule,
            IrError::MissingPredictor {
                sink: g.nodes.contains_key(&g.sink).then_some(g.sink),
            },
        ));
    }
    g.graph_checked = true;
    Ok(Some("graph".into()))
}

// ---- StageGraphBuilder ---------------------------------------------------------------

pub(crate) const BUILDER_RULES: &[Rule] = &[
    Rule {
        name: "extend-stage",
        apply: extend_stage,
    },
    Rule {
        name: "open-stage",
        apply: open_stage,
    },
];

fn kind_of(n: &WorkNode) -> Option<OpKind> {
    n.op.kind()
}

/// Appends a node to its producer's stage when the chain can stay fused.
fn extend_stage(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let map = g.node_stage_map();
    let mut hit = None;
    for n in g.nodes.values() {
        let Some(kind) = kind_of(n) else { continue };
        if map.contains_key(&n.id) || n.inputs.len() != 1 || kind.is_pipeline_breaker() {
            continue;
        }
        let p = n.inputs[0];
        let Some(&s) = map.get(&p) else { continue };
        if g.stages[&s].last() != Some(&p) {
            continue;
        }
        if kind_of(&g.nodes[&p]).is_some_and(OpKind::is_compute_bound) {
            continue;
        }
        if g.consumers(p).next() != Some(n.id) {
            continue;
        }
        hit = Some((n.id, s));
        break;
    }
    let Some((id, s)) = hit else { return Ok(None) };
    g.stages.get_mut(&s).expect("stage").push(id);
    Ok(Some(format!("{id}->s{s}")))
}

fn open_stage(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let map = g.node_stage_map();
    let ready = g.nodes.values().find(|n| {
        !n.op.is_source()
            && !map.contains_key(&n.id)
            && n.inputs
                .iter()
                .all(|i| map.contains_key(i) || g.nodes[i].op.is_source())
    });
    let Some(n) = ready else { return Ok(None) };
    let id = n.id;
    let s = g.next_stage;
    g.next_stage += 1;
    g.stages.insert(s, vec![id]);
    Ok(Some(format!("s{s}@{id}")))
}

// ---- StageGraphOptimizer -------------------------------------------------------------

pub(crate) const OPTIMIZER_RULES: &[Rule] = &[
    Rule {
        name: "branch-removal",
        apply: branch_removal,
    },
    Rule {
        name: "equal-stage-merge",
        apply: equal_stage_merge,
    },
    Rule {
        name: "inline-single-transform",
        apply: inline_single_transform,
    },
    Rule {
        name: "push-linear-through-concat",
        apply: push_linear_through_concat,
    },
    Rule {
        name: "empty-stage-removal",
        apply: empty_stage_removal,
    },
    Rule {
        name: "dead-node-elimination",
        apply: dead_node_elimination,
    },
];

/// Common subexpressions: a node computing exactly what an earlier node computes.
fn branch_removal(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let nodes: Vec<&WorkNode> = g.nodes.values().filter(|n| !n.op.is_source()).collect();
    let mut hit = None;
    'outer: for (j, b) in nodes.iter().enumerate() {
        for a in &nodes[..j] {
            if a.same_computation(b) {
                hit = Some((a.id, b.id));
                break 'outer;
            }
        }
    }
    let Some((keep, drop)) = hit else { return Ok(None) };
    g.replace_uses(drop, keep);
    g.remove_node(drop);
    Ok(Some(format!("{drop}=>{keep}")))
}

/// Stages computing the same operator sequence over the same inputs.
fn equal_stage_merge(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let ids: Vec<u32> = g.stages.keys().copied().collect();
    for (j, &b) in ids.iter().enumerate() {
        for &a in &ids[..j] {
            if let Some(pairs) = stage_correspondence(g, a, b) {
                for (na, nb) in &pairs {
                    g.replace_uses(*nb, *na);
                }
                for (_, nb) in &pairs {
                    g.remove_node(*nb);
                }
                g.stages.remove(&b);
                return Ok(Some(format!("s{b}=>s{a}")));
            }
        }
    }
    Ok(None)
}

fn stage_correspondence(g: &WorkGraph, a: u32, b: u32) -> Option<Vec<(NodeId, NodeId)>> {
    let (sa, sb) = (&g.stages[&a], &g.stages[&b]);
    if sa.len() != sb.len() || sa.is_empty() {
        return None;
    }
    let mut pairs: Vec<(NodeId, NodeId)> = Vec::with_capacity(sa.len());
    for (x, y) in sa.iter().zip(sb) {
        let (nx, ny) = (&g.nodes[x], &g.nodes[y]);
        if nx.op != ny.op || nx.params != ny.params || nx.declared != ny.declared || nx.inputs.len() != ny.inputs.len()
        {
            return None;
        }
        for (ix, iy) in nx.inputs.iter().zip(&ny.inputs) {
            let mapped = pairs.iter().find(|(_, q)| q == iy).map(|(p, _)| *p);
            let ok = match mapped {
                Some(p) => p == *ix,
                None => ix == iy && !sa.contains(ix),
            };
            if !ok {
                return None;
            }
        }
        pairs.push((*x, *y));
    }
    Some(pairs)
}

/// Folds a one-node stage into its sole consumer stage, or else into a producer stage
/// that reaches it only directly.
fn inline_single_transform(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let singles: Vec<u32> = g
        .stages
        .iter()
        .filter(|(_, ns)| ns.len() == 1)
        .map(|(s, _)| *s)
        .collect();
    for s in singles {
        let node = g.stages[&s][0];
        let consumers = g.stage_consumers(s);
        if consumers.len() == 1 {
            let c = *consumers.iter().next().expect("one");
            g.stages.remove(&s);
            g.stages.get_mut(&c).expect("stage").insert(0, node);
            return Ok(Some(format!("s{s}->s{c}")));
        }
        let producer = g.stage_deps(s).into_iter().find(|&p| !g.has_indirect_path(p, s));
        if let Some(p) = producer {
            g.stages.remove(&s);
            g.stages.get_mut(&p).expect("stage").push(node);
            return Ok(Some(format!("s{s}->s{p}")));
        }
    }
    Ok(None)
}

/// `w·concat(x₁..xₖ) + b = Σ wᵢ·xᵢ + b`: each branch gets a partial dot product in its
/// own stage and the classifier becomes a sum.
fn push_linear_through_concat(g: &mut WorkGraph, store: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let rule = "push-linear-through-concat";
    let target = g.nodes.values().find(|n| {
        n.op == PlanOp::LinearBinaryClassifier && n.inputs.len() == 1 && g.nodes[&n.inputs[0]].op == PlanOp::Concat
    });
    let Some(lin) = target else { return Ok(None) };
    let (lid, cid) = (lin.id, lin.inputs[0]);
    let weights_len = match lin.params.map(|p| store.view(&p)) {
        Some(Ok(v)) => match &*v {
            ParamView::Linear(p) => p.weights.len(),
            other => {
                return Err(validation(
                    rule,
                    IrError::WrongParams {
                        node: lid,
                        kind: "LinearBinaryClassifier",
                        found: other.kind_name(),
                    },
                ))
            }
        },
        _ => {
            return Err(validation(
                rule,
                IrError::MissingParams {
                    node: lid,
                    kind: "LinearBinaryClassifier",
                },
            ))
        }
    };
    let branches: Vec<(NodeId, usize)> = g.nodes[&cid]
        .inputs
        .iter()
        .map(|i| (*i, g.nodes[i].dtype().and_then(DataType::vector_len).unwrap_or(0)))
        .collect();
    let total: usize = branches.iter().map(|b| b.1).sum();
    if total != weights_len {
        return Err(OptimizeError::LengthMismatch {
            node: lid,
            weights: weights_len,
            inputs: total,
        });
    }
    let lin_stage = g.stage_of(lid);
    let params = g.nodes[&lid].params;
    let mut offset = 0;
    let mut dots = Vec::with_capacity(branches.len());
    for (x, len) in branches {
        let id = g.next_node_id();
        let density = match g.nodes[&x].dtype() {
            Some(DataType::Vector { density, .. }) => *density,
            _ => Density::Dense,
        };
        let vectorizable = g.nodes[&lid].declared.is_some_and(|s| s.vectorizable);
        g.nodes.insert(
            id,
            WorkNode {
                id,
                op: PlanOp::PartialDot { offset, len },
                params,
                inputs: vec![x],
                declared: Some(TrainingStats::new(1, Density::Dense, vectorizable)),
                schema: Some(Schema::single(id.to_string(), DataType::Scalar)),
                stats: Some(TrainingStats::new(
                    1,
                    Density::Dense,
                    vectorizable && density == Density::Dense,
                )),
                density_labeled: false,
                vectorizable_labeled: false,
            },
        );
        let home = g.stage_of(x).or(lin_stage);
        if let Some(s) = home {
            let ns = g.stages.get_mut(&s).expect("stage");
            let at = ns
                .iter()
                .position(|n| *n == x)
                .map_or_else(|| ns.iter().position(|n| *n == lid).unwrap_or(ns.len()), |p| p + 1);
            ns.insert(at, id);
        }
        dots.push(id);
        offset += len;
    }
    let l = g.nodes.get_mut(&lid).expect("exists");
    l.op = PlanOp::ScoreSum;
    l.inputs = dots;
    if g.consumers(cid).next().is_none() {
        g.remove_node(cid);
    }
    Ok(Some(format!("{lid}")))
}

fn empty_stage_removal(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let Some(s) = g.stages.iter().find(|(_, ns)| ns.is_empty()).map(|(s, _)| *s) else {
        return Ok(None);
    };
    g.stages.remove(&s);
    Ok(Some(format!("s{s}")))
}

fn dead_node_elimination(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let dead = g
        .nodes
        .values()
        .find(|n| !n.op.is_source() && n.id != g.sink && g.consumers(n.id).next().is_none())
        .map(|n| n.id);
    let Some(id) = dead else { return Ok(None) };
    g.remove_node(id);
    Ok(Some(id.to_string()))
}

// ---- OutputGraphValidator ------------------------------------------------------------

pub(crate) const OUTPUT_RULES: &[Rule] = &[
    Rule {
        name: "stage-schema-synthesis",
        apply: stage_schema_synthesis,
    },
    Rule {
        name: "density-labeling",
        apply: density_labeling,
    },
    Rule {
        name: "vectorizable-labeling",
        apply: vectorizable_labeling,
    },
    Rule {
        name: "well-formedness",
        apply: well_formedness,
    },
];

/// Checks that every stage has typed nodes from which its I/O schema can be built.
fn stage_schema_synthesis(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let Some(s) = g.stages.keys().copied().find(|s| !g.synthesized.contains(s)) else {
        return Ok(None);
    };
    for n in &g.stages[&s] {
        if g.nodes.get(n).and_then(|n| n.schema.as_ref()).is_none() {
            return Err(OptimizeError::Malformed {
                rule: "stage-schema-synthesis",
                detail: format!("s{s}: node {n} has no schema"),
            });
        }
    }
    g.synthesized.insert(s);
    Ok(Some(format!("s{s}")))
}

fn density_labeling(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let Some(n) = g.nodes.values_mut().find(|n| !n.density_labeled) else {
        return Ok(None);
    };
    if let (Some(DataType::Vector { density, .. }), Some(stats)) = (
        n.schema
            .as_ref()
            .filter(|s| s.len() == 1)
            .map(|s| s.columns()[0].dtype.clone()),
        n.stats.as_mut(),
    ) {
        stats.density = density;
    }
    n.density_labeled = true;
    Ok(Some(n.id.to_string()))
}

/// Compute-bound operators over dense inputs keep a declared vectorizable hint; every
/// other operator is labeled scalar.
fn vectorizable_labeling(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    let Some(id) = g.nodes.values().find(|n| !n.vectorizable_labeled).map(|n| n.id) else {
        return Ok(None);
    };
    let n = &g.nodes[&id];
    let dense_input = !n.inputs.is_empty()
        && n.inputs.iter().all(|i| {
            matches!(
                g.nodes[i].dtype(),
                Some(DataType::Vector {
                    density: Density::Dense,
                    ..
                })
            )
        });
    let compute = n.op.kind().is_some_and(OpKind::is_compute_bound);
    let declared = n.declared.is_some_and(|s| s.vectorizable);
    let label = compute && dense_input && declared;
    let n = g.nodes.get_mut(&id).expect("exists");
    if let Some(s) = n.stats.as_mut() {
        s.vectorizable = label;
    }
    n.vectorizable_labeled = true;
    Ok(Some(id.to_string()))
}

fn well_formedness(g: &mut WorkGraph, _: &ObjectStore) -> Result<Option<String>, OptimizeError> {
    if g.well_formed {
        return Ok(None);
    }
    let malformed = |detail: String| OptimizeError::Malformed {
        rule: "well-formedness",
        detail,
    };
    let map = g.node_stage_map();
    let placed: usize = g.stages.values().map(Vec::len).sum();
    if placed != map.len() {
        return Err(malformed("a node is assigned to more than one stage".into()));
    }
    for n in g.nodes.values() {
        if !n.op.is_source() && !map.contains_key(&n.id) {
            return Err(malformed(format!("{} is not assigned to a stage", n.id)));
        }
        for i in &n.inputs {
            if !g.nodes.contains_key(i) {
                return Err(malformed(format!("{} reads missing node {i}", n.id)));
            }
        }
    }
    for (s, ns) in &g.stages {
        for (k, n) in ns.iter().enumerate() {
            for i in &g.nodes[n].inputs {
                if map.get(i) == Some(s) && !ns[..k].contains(i) {
                    return Err(malformed(format!("s{s}: {n} precedes its input {i}")));
                }
            }
        }
    }
    // Acyclic stage graph with exactly one terminal stage, the sink's.
    let order = topo_order(g).ok_or_else(|| malformed("stage graph has a cycle".into()))?;
    let terminals: BTreeSet<u32> = order
        .iter()
        .copied()
        .filter(|s| g.stage_consumers(*s).is_empty())
        .collect();
    let sink_stage = map.get(&g.sink).copied();
    if terminals.len() != 1 || sink_stage != terminals.iter().next().copied() {
        return Err(malformed(format!(
            "expected a single terminal stage holding the sink, found {terminals:?}"
        )));
    }
    g.well_formed = true;
    Ok(Some("stages".into()))
}

/// Kahn's algorithm, smallest stage id first among ready stages.
pub(crate) fn topo_order(g: &WorkGraph) -> Option<Vec<u32>> {
    let mut remaining: BTreeSet<u32> = g.stages.keys().copied().collect();
    let deps: std::collections::BTreeMap<u32, BTreeSet<u32>> =
        remaining.iter().map(|s| (*s, g.stage_deps(*s))).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let next = remaining
            .iter()
            .copied()
            .find(|s| deps[s].iter().all(|d| !remaining.contains(d)))?;
        remaining.remove(&next);
        order.push(next);
    }
    Some(order)
}
