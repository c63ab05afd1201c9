mod common;

use std::sync::Arc;

use common::{prediction_matches, random_pipeline, rng};
use stageserve::prelude::*;

fn runtime(materialization: bool) -> Runtime {
    let mut config = RuntimeConfig {
        materialization,
        ..Default::default()
    };
    config.scheduler.workers = 2;
    Runtime::new(Arc::new(ObjectStore::new()), config)
}

#[test]
fn random_pipelines_match_reference_on_both_engines() {
    for materialization in [false, true] {
        let rt = runtime(materialization);
        for seed in 0..80u64 {
            let g = random_pipeline(seed, rt.store(), 12);
            let id = rt
                .register_graph(&g.graph, RegisterOptions::default())
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            let mut r = rng(seed ^ 0xabc);
            let records: Vec<Record> = (0..20).map(|_| g.record(&mut r)).collect();
            let batch = rt.predict_batch(id, &records).unwrap();
            for (rec, b) in records.iter().zip(&batch) {
                let want = g.interpret(rec);
                let got = rt.predict(id, rec).unwrap();
                assert!(
                    prediction_matches(&got, &want, 1e-6),
                    "seed {seed}: {got:?} vs {want:?} for {rec:?}"
                );
                assert!(
                    prediction_matches(b, &want, 1e-6),
                    "seed {seed} batch: {b:?} vs {want:?}"
                );
            }
        }
        rt.shutdown();
    }
}

#[test]
fn generator_respects_node_budget_and_covers_both_predictors() {
    let store = ObjectStore::new();
    let mut linear = 0;
    let mut trees = 0;
    for seed in 0..100 {
        let g = random_pipeline(seed, &store, 12);
        assert!(g.graph.len() <= 12);
        match g.graph.node(g.graph.sink().unwrap()).unwrap().kind {
            TransformKind::LinearBinaryClassifier => linear += 1,
            TransformKind::TreeEnsemble => trees += 1,
            _ => unreachable!(),
        }
    }
    assert!(linear > 20 && trees > 20, "{linear} linear, {trees} trees");
}

#[test]
fn reference_tokenizer_and_ngrams() {
    let toks = common::ref_tokenize("ab, cé!  a", true);
    assert_eq!(toks, ["ab", ",", "cé", "!", "a"]);
    assert_eq!(common::ref_tokenize("ab, cé!", false), ["ab", "cé"]);
    let d = NgramParams::new(2, vec!["ab".into(), "cé".into(), "zz".into()]);
    assert_eq!(common::ref_char_ngrams(&d, &toks), [1.0, 1.0, 0.0]);
    let w = NgramParams::new(2, vec!["ab ,".into(), ", cé".into()]);
    assert_eq!(common::ref_word_ngrams(&w, &toks), [1.0, 1.0]);
}

#[test]
fn generated_records_exercise_the_pipelines() {
    let store = ObjectStore::new();
    let mut varied = 0;
    for seed in 0..100 {
        let g = random_pipeline(seed, &store, 12);
        let mut r = rng(seed);
        let mut scores: Vec<f64> = (0..20).map(|_| g.interpret(&g.record(&mut r)).score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        if scores.len() > 3 {
            varied += 1;
        }
    }
    assert!(varied >= 80, "only {varied} of 100 pipelines vary with their input");
}
