mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{random_pipeline, rng};
use stageserve::bundle::{generate_fleet, read_manifest, sample_records, write_fleet};
use stageserve::prelude::*;

fn runtime(config: RuntimeConfig) -> Runtime {
    Runtime::new(Arc::new(ObjectStore::new()), config)
}

fn load_all(rt: &Runtime, dirs: &[std::path::PathBuf]) -> Vec<PlanId> {
    dirs.iter()
        .map(|d| {
            let (graph, _) = load_bundle(d, rt.store()).unwrap();
            rt.register_graph(&graph, RegisterOptions::default()).unwrap()
        })
        .collect()
}

#[test]
fn fleet_blobs_are_shared_across_bundles() {
    for template in [Template::Sa, Template::Ac] {
        let dir = tempfile::tempdir().unwrap();
        let spec = FleetSpec::desk(template, 12, 3).with_dict_size(500);
        let dirs = write_fleet(&spec, dir.path()).unwrap();
        let mut distinct = BTreeSet::new();
        let mut listed = 0;
        for d in &dirs {
            let m = read_manifest(d).unwrap();
            listed += m.blobs.len();
            distinct.extend(m.blobs.keys().copied());
        }
        let rt = runtime(RuntimeConfig::default());
        let ids = load_all(&rt, &dirs);
        let stats = rt.store().stats();
        assert_eq!(stats.blob_count, distinct.len(), "{template}");
        assert!(distinct.len() < listed, "{template}: nothing shared");
        assert!(stats.logical_bytes > stats.stored_bytes);
        // Loading the same bundles again adds no blobs and resolves to the same plans.
        assert_eq!(load_all(&rt, &dirs), ids);
        assert_eq!(rt.store().stats().blob_count, distinct.len());
        if template == Template::Ac {
            // Featurizer stages come from a pool of 4 versions.
            assert!(rt.stage_instances() < rt.metrics().plan_stages);
        }
        rt.shutdown();
    }
}

#[test]
fn bundles_predict_like_the_graphs_they_came_from() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FleetSpec::desk(Template::Sa, 6, 8).with_dict_size(800);
    let dirs = write_fleet(&spec, dir.path()).unwrap();
    let direct = runtime(RuntimeConfig::default());
    let fleet = generate_fleet(&spec, direct.store()).unwrap();
    let loaded = runtime(RuntimeConfig::default());
    let ids = load_all(&loaded, &dirs);
    let records = sample_records(&spec, 2, 30);
    for (m, id) in fleet.iter().zip(&ids) {
        let d = direct.register_graph(&m.graph, RegisterOptions::default()).unwrap();
        for r in &records {
            assert_eq!(direct.predict(d, r).unwrap(), loaded.predict(*id, r).unwrap());
        }
    }
}

#[test]
fn random_pipelines_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let rt = runtime(RuntimeConfig::default());
    for seed in 0..40u64 {
        let g = random_pipeline(seed, rt.store(), 12);
        let path = dir.path().join(format!("p{seed}"));
        save_bundle(&g.graph, rt.store(), &path, "p").unwrap();
        let fresh = ObjectStore::new();
        let (back, m) = load_bundle(&path, &fresh).unwrap();
        assert_eq!(back, g.graph, "seed {seed}");
        assert_eq!(fresh.blob_count(), m.blobs.len());
        let a = rt.register_graph(&g.graph, RegisterOptions::default()).unwrap();
        let other = Runtime::new(Arc::new(fresh), RuntimeConfig::default());
        let b = other.register_graph(&back, RegisterOptions::default()).unwrap();
        let mut r = rng(seed);
        for _ in 0..10 {
            let rec = g.record(&mut r);
            assert_eq!(rt.predict(a, &rec).unwrap(), other.predict(b, &rec).unwrap());
        }
    }
}

#[test]
fn runtime_switches_do_not_change_results() {
    let spec = FleetSpec::desk(Template::Ac, 5, 4);
    let records = sample_records(&spec, 6, 40);
    let mut outputs = Vec::new();
    for (pre_resolve, pooling, materialization) in [
        (true, true, false),
        (false, true, false),
        (true, false, false),
        (false, false, true),
        (true, true, true),
    ] {
        let mut config = RuntimeConfig {
            pre_resolve,
            pooling,
            materialization,
            ..Default::default()
        };
        config.scheduler.workers = 2;
        let rt = runtime(config);
        let fleet = generate_fleet(&spec, rt.store()).unwrap();
        let mut out = Vec::new();
        for m in &fleet {
            let id = rt.register_graph(&m.graph, RegisterOptions::default()).unwrap();
            let single: Vec<Prediction> = records.iter().map(|r| rt.predict(id, r).unwrap()).collect();
            assert_eq!(single, rt.predict_batch(id, &records).unwrap());
            out.push(single);
        }
        assert_eq!(rt.metrics().predictions, (fleet.len() * records.len() * 2) as u64);
        rt.shutdown();
        outputs.push(out);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn pre_resolved_plans_serve_the_first_request_without_growing_the_pool() {
    let spec = FleetSpec::desk(Template::Sa, 4, 1).with_dict_size(500);
    let records = sample_records(&spec, 1, 5);
    for pre_resolve in [true, false] {
        let config = RuntimeConfig {
            pre_resolve,
            ..Default::default()
        };
        let rt = runtime(config);
        let fleet = generate_fleet(&spec, rt.store()).unwrap();
        let ids: Vec<PlanId> = fleet
            .iter()
            .map(|m| rt.register_graph(&m.graph, RegisterOptions::default()).unwrap())
            .collect();
        let before = rt.pool_stats().growth;
        rt.predict(ids[0], &records[0]).unwrap();
        let cold = rt.pool_stats().growth - before;
        if pre_resolve {
            assert_eq!(cold, 0);
        } else {
            assert!(cold > 0);
        }
        // Steady state never grows, whichever way the plan was loaded.
        for id in &ids {
            for r in &records {
                rt.predict(*id, r).unwrap();
            }
        }
        let warm = rt.pool_stats().growth;
        for id in &ids {
            for r in &records {
                rt.predict(*id, r).unwrap();
            }
        }
        assert_eq!(rt.pool_stats().growth, warm, "pre_resolve={pre_resolve}");
        assert_eq!(rt.pool_stats().outstanding, 0);
    }
}
