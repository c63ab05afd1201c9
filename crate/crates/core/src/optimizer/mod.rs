//! Rule-based rewriting of a transform graph into a plan of fused stages.
//!
//! Four steps run in order, each a set of rules applied to fixpoint:
//! input validation, stage building, stage optimization and output validation.

mod plan;
mod rules;
mod work;

use std::fmt;

use thiserror::Error;

use crate::ir::{IrError, NodeId, TransformGraph, TypedGraph};
use crate::ops::KernelError;
use crate::store::ObjectStore;

pub use plan::{
    compile_to_physical, EngineHint, LogicalStage, ModelPlan, PhysicalStageBinding, PlanNode, PredictorKind,
    StageGraph, StageId,
};
pub use work::{PlanOp, WorkGraph, WorkNode};

use rules::Rule;

/// Rule applications allowed per step, per node.
const CAP_PER_NODE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("{rule}: {source}")]
    Validation {
        rule: &'static str,
        #[source]
        source: IrError,
    },
    #[error("{rule}: {detail}")]
    Malformed { rule: &'static str, detail: String },
    #[error("node {node}: classifier has {weights} weights but its concatenated inputs total {inputs}")]
    LengthMismatch {
        node: NodeId,
        weights: usize,
        inputs: usize,
    },
    #[error("{step}: no fixpoint after {cap} rule applications")]
    IterationCap { step: Step, cap: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

impl OptimizeError {
    /// The rule that rejected the graph, if any.
    pub fn rule(&self) -> Option<&'static str> {
        match self {
            OptimizeError::Validation { rule, .. } | OptimizeError::Malformed { rule, .. } => Some(rule),
            OptimizeError::LengthMismatch { .. } => Some("push-linear-through-concat"),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Step {
    InputGraphValidator,
    StageGraphBuilder,
    StageGraphOptimizer,
    OutputGraphValidator,
}

impl Step {
    pub const ALL: [Step; 4] = [
        Step::InputGraphValidator,
        Step::StageGraphBuilder,
        Step::StageGraphOptimizer,
        Step::OutputGraphValidator,
    ];

    fn rules(self) -> &'static [Rule] {
        match self {
            Step::InputGraphValidator => rules::INPUT_RULES,
            Step::StageGraphBuilder => rules::BUILDER_RULES,
            Step::StageGraphOptimizer => rules::OPTIMIZER_RULES,
            Step::OutputGraphValidator => rules::OUTPUT_RULES,
        }
    }

    /// Rule names in the order they are tried.
    pub fn rule_names(self) -> Vec<&'static str> {
        self.rules().iter().map(|r| r.name).collect()
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepReport {
    pub step: Step,
    /// Passes over the rule list; the last one applied nothing.
    pub passes: usize,
    /// Rule name and site of every application, in order.
    pub applications: Vec<(&'static str, String)>,
}

impl StepReport {
    pub fn count(&self, rule: &str) -> usize {
        self.applications.iter().filter(|(r, _)| *r == rule).count()
    }
}

/// Runs one step to fixpoint. Rules are tried in declaration order; after any rule
/// applies, the pass restarts from the first rule.
pub fn run_rewrite_step(
    graph: &WorkGraph,
    step: Step,
    store: &ObjectStore,
) -> Result<(WorkGraph, StepReport), OptimizeError> {
    let mut g = graph.clone();
    let mut report = StepReport {
        step,
        passes: 0,
        applications: Vec::new(),
    };
    loop {
        report.passes += 1;
        let mut applied = false;
        for rule in step.rules() {
            if let Some(site) = (rule.apply)(&mut g, store)? {
                report.applications.push((rule.name, site));
                applied = true;
                break;
            }
        }
        if !applied {
            return Ok((g, report));
        }
        let cap = CAP_PER_NODE * (g.nodes.len() + 1);
        if report.applications.len() > cap {
            return Err(OptimizeError::IterationCap { step, cap });
        }
    }
}

fn work_graph(graph: &TransformGraph) -> Result<WorkGraph, OptimizeError> {
    WorkGraph::new(graph).ok_or(OptimizeError::Validation {
        rule: "graph-validation",
        source: IrError::EmptyGraph,
    })
}

/// Runs input validation only: schemas and resolved statistics for every node.
pub fn validate_input(graph: &TransformGraph, store: &ObjectStore) -> Result<TypedGraph, OptimizeError> {
    let (g, _) = run_rewrite_step(&work_graph(graph)?, Step::InputGraphValidator, store)?;
    let mut typed = TypedGraph {
        schemas: Default::default(),
        stats: Default::default(),
    };
    for n in g.nodes() {
        if let (Some(schema), Some(stats)) = (&n.schema, n.stats) {
            typed.schemas.insert(n.id, schema.clone());
            typed.stats.insert(n.id, stats);
        }
    }
    Ok(typed)
}

/// Runs all four steps, returning the work graph after each.
pub fn optimize(graph: &TransformGraph, store: &ObjectStore) -> Result<(WorkGraph, Vec<StepReport>), OptimizeError> {
    let mut g = work_graph(graph)?;
    let mut reports = Vec::with_capacity(Step::ALL.len());
    for step in Step::ALL {
        let (next, report) = run_rewrite_step(&g, step, store)?;
        g = next;
        reports.push(report);
    }
    Ok((g, reports))
}

/// Compiles a transform graph into an executable plan.
pub fn plan(graph: &TransformGraph, store: &ObjectStore) -> Result<ModelPlan, OptimizeError> {
    plan_with_reports(graph, store).map(|(p, _)| p)
}

pub fn plan_with_reports(
    graph: &TransformGraph,
    store: &ObjectStore,
) -> Result<(ModelPlan, Vec<StepReport>), OptimizeError> {
    let (g, reports) = optimize(graph, store)?;
    let predictor = match graph.sink().and_then(|s| graph.node(s)).map(|n| n.kind.name()) {
        Some("TreeEnsemble") => PredictorKind::Tree,
        _ => PredictorKind::Linear,
    };
    let sg = plan::finalize(&g)?;
    Ok((plan::assemble(sg, predictor)?, reports))
}
