mod common;

use common::{golden, render, sa_pipeline};

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use stageserve::bundle::{ac_graph, FleetSpec};
use stageserve::ir::NodeId;
use stageserve::optimizer::{self, ModelPlan, OptimizeError, Step};
use stageserve::prelude::*;

#[test]
fn sa_pipeline_compiles_to_golden_two_stage_plan() {
    let store = ObjectStore::new();
    let g = sa_pipeline(&store);
    // Select, Tokenize, CharNgram, WordNgram, Concat, Linear plus the source.
    assert_eq!(g.len(), 7);
    let (plan, reports) = optimizer::plan_with_reports(&g, &store).unwrap();
    assert_eq!(render(&plan), golden("sa_plan.txt"));
    assert_eq!(plan.stage_count(), 2);
    assert_eq!(plan.engine_hint, EngineHint::RequestResponse);
    let opt = reports.iter().find(|r| r.step == Step::StageGraphOptimizer).unwrap();
    assert_eq!(opt.count("push-linear-through-concat"), 1);
}

#[test]
fn ac_pipeline_compiles_to_golden_plan() {
    let store = ObjectStore::new();
    let g = ac_graph(&FleetSpec::desk(Template::Ac, 1, 3), &store, 0).unwrap();
    let plan = optimizer::plan(&g, &store).unwrap();
    assert_eq!(render(&plan), golden("ac_plan.txt"));
}

#[test]
fn every_step_reaches_a_fixpoint_and_reports_rules() {
    let store = ObjectStore::new();
    let (_, reports) = optimizer::optimize(&sa_pipeline(&store), &store).unwrap();
    assert_eq!(reports.iter().map(|r| r.step).collect::<Vec<_>>(), Step::ALL);
    for r in &reports {
        for (rule, _) in &r.applications {
            assert!(r.step.rule_names().contains(rule), "{rule} not in {}", r.step);
        }
    }
}

#[test]
fn planning_is_deterministic_across_stores() {
    let a = ObjectStore::new();
    let b = ObjectStore::new();
    let pa = optimizer::plan(&sa_pipeline(&a), &a).unwrap();
    let pb = optimizer::plan(&sa_pipeline(&b), &b).unwrap();
    assert_eq!(pa.digest, pb.digest);
    assert_eq!(pa.dump(), pb.dump());
}

#[test]
fn invalid_graphs_are_rejected_by_name() {
    let store = ObjectStore::new();
    let b = PipelineBuilder::new(&store);
    let src = b
        .csv(
            Schema::single(
                "Features",
                DataType::Vector {
                    density: Density::Dense,
                    len: 4,
                },
            ),
            ',',
        )
        .unwrap();
    let wrong = LinearParams {
        weights: vec![1.0; 5],
        bias: 0.0,
    };
    let g = src.select("Features").unwrap().linear_classifier(&wrong).unwrap();
    let err = optimizer::plan(g.graph(), &store).unwrap_err();
    assert_eq!(err.rule(), Some("schema-validation"), "{err}");

    let err = src.select("Nope").unwrap().normalize_l2().unwrap().plan().unwrap_err();
    assert!(err.to_string().contains("Nope"), "{err}");

    // A graph without a predictor.
    let err = src
        .select("Features")
        .unwrap()
        .normalize_l2()
        .unwrap()
        .plan()
        .unwrap_err();
    assert!(
        matches!(err, stageserve::Error::Optimize(OptimizeError::Validation { .. })),
        "{err}"
    );

    // Declared statistics smaller than the natural bound.
    let pca = PcaParams {
        dim: 4,
        components: 2,
        mean: vec![0.0; 4],
        projection: vec![0.5; 8],
    };
    let lin = LinearParams {
        weights: vec![1.0, 1.0],
        bias: 0.0,
    };
    let small = src
        .select("Features")
        .unwrap()
        .pca(&pca)
        .unwrap()
        .with_stats(TrainingStats::new(1, Density::Dense, false))
        .linear_classifier(&lin)
        .unwrap();
    assert!(small.plan().is_err());
}

#[test]
fn unresolved_parameters_fail_validation() {
    let store = ObjectStore::new();
    let g = sa_pipeline(&store);
    let empty = ObjectStore::new();
    let err = optimizer::plan(&g, &empty).unwrap_err();
    assert_eq!(err.rule(), Some("schema-propagation"), "{err}");
}

/// Structural invariants of a compiled plan.
fn check_plan(graph: &TransformGraph, plan: &ModelPlan) -> Result<(), String> {
    let sg = &plan.logical;
    let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (i, s) in sg.stages.iter().enumerate() {
        if s.id.0 as usize != i {
            return Err(format!("stage {i} has id {}", s.id));
        }
        if s.transforms.is_empty() {
            return Err(format!("{} is empty", s.id));
        }
        for d in &s.deps {
            if d.0 as usize >= i {
                return Err(format!("{} depends on later {d}", s.id));
            }
        }
        for n in &s.transforms {
            if owner.insert(n.id, i).is_some() {
                return Err(format!("{} in two stages", n.id));
            }
        }
    }
    for (i, s) in sg.stages.iter().enumerate() {
        for n in &s.transforms {
            for input in &n.inputs {
                if *input == sg.source {
                    continue;
                }
                match owner.get(input) {
                    Some(&j) if j == i => {}
                    Some(&j) if s.deps.iter().any(|d| d.0 as usize == j) && s.inputs.contains(input) => {}
                    other => return Err(format!("{} reads {input} from {other:?} in {}", n.id, s.id)),
                }
            }
        }
    }
    if owner.get(&sg.sink_node) != Some(&(sg.sink.0 as usize)) {
        return Err("sink node not in sink stage".into());
    }
    if sg.stages.iter().any(|s| s.deps.contains(&sg.sink)) {
        return Err("sink stage has dependents".into());
    }
    let graph_params: BTreeSet<Checksum> = graph.nodes().filter_map(|n| n.params).collect();
    if plan.param_refs != graph_params {
        return Err("plan parameter set differs from graph".into());
    }
    let stage_params: BTreeSet<Checksum> = sg.stages.iter().flat_map(|s| s.param_refs.iter().copied()).collect();
    if stage_params != graph_params {
        return Err("stage parameter sets differ from graph".into());
    }
    if plan.bindings.len() != sg.stages.len() {
        return Err("one physical binding per logical stage".into());
    }
    if sg.stages.len() >= graph.len() {
        return Err("no fusion happened".into());
    }
    Ok(())
}

#[test]
fn fleet_plans_satisfy_invariants() {
    let store = ObjectStore::new();
    let g = sa_pipeline(&store);
    check_plan(&g, &optimizer::plan(&g, &store).unwrap()).unwrap();
    let g = ac_graph(&FleetSpec::desk(Template::Ac, 1, 3), &store, 0).unwrap();
    check_plan(&g, &optimizer::plan(&g, &store).unwrap()).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_plans_satisfy_invariants(seed in any::<u64>()) {
        let store = ObjectStore::new();
        let g = common::random_pipeline(seed, &store, 12);
        let plan = optimizer::plan(&g.graph, &store).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check_plan(&g.graph, &plan).map_err(TestCaseError::fail)?;
        let again = optimizer::plan(&g.graph, &store).unwrap();
        prop_assert_eq!(plan.digest, again.digest);
    }
}
