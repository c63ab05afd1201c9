mod common;

use std::sync::Arc;
use std::thread;

use common::{prediction_matches, random_pipeline, rng};
use rand::Rng;
use stageserve::optimizer::EngineHint;
use stageserve::prelude::*;
use stageserve::runtime::RuntimeError;
use stageserve::scheduler::sim::{simulate, Trace};
use stageserve::scheduler::QueuePolicy;

#[test]
fn simulated_traces_pass_the_independent_checker() {
    for seed in 0..2000 {
        let trace = Trace::random(seed, 1 + (seed as usize % 30));
        for policy in [QueuePolicy::TwoQueue, QueuePolicy::Fifo] {
            let bound = 1 + (seed as usize % 9);
            let r = simulate(&trace, policy, bound);
            common::check_sim(&trace, &r).unwrap_or_else(|e| panic!("seed {seed} {policy:?}: {e}"));
            assert_eq!(r.dependency_violations, 0);
        }
    }
}

#[test]
fn checker_rejects_a_broken_report() {
    let trace = Trace::burst(3, 3, 2);
    let mut r = simulate(&trace, QueuePolicy::TwoQueue, 4);
    common::check_sim(&trace, &r).unwrap();
    r.timeline[1].swap(0, 2);
    let (s0, a0, _) = r.timeline[1][0];
    let (s2, a2, _) = r.timeline[1][2];
    // Stage 2 now claims to start where stage 0 did.
    r.timeline[1][0] = (s0, a2, a2 + 1);
    r.timeline[1][2] = (s2, a0, a0 + 1);
    assert!(common::check_sim(&trace, &r).is_err());
    let mut r = simulate(&trace, QueuePolicy::TwoQueue, 4);
    r.released -= 1;
    assert!(common::check_sim(&trace, &r).is_err());
}

#[test]
fn two_queue_policy_finishes_started_work_first() {
    // A burst of three-stage chains on one worker: with continuations first, each
    // instance completes before the next starts.
    let trace = Trace::burst(5, 3, 1);
    let two = simulate(&trace, QueuePolicy::TwoQueue, 64);
    let fifo = simulate(&trace, QueuePolicy::Fifo, 64);
    assert_eq!(two.priority_violations, 0);
    assert!(two.vector_high_water <= 3, "{}", two.vector_high_water);
    assert!(fifo.vector_high_water > two.vector_high_water);
    assert_eq!(two.makespan, fifo.makespan);
}

fn batch_runtime(workers: usize, queue_bound: usize) -> Runtime {
    let mut config = RuntimeConfig::default();
    config.scheduler.workers = workers;
    config.scheduler.queue_bound = queue_bound;
    Runtime::new(Arc::new(ObjectStore::new()), config)
}

#[test]
fn concurrent_batches_match_reference_and_return_every_vector() {
    let rt = Arc::new(batch_runtime(3, 1 << 14));
    let gens: Vec<_> = (0..12).map(|s| random_pipeline(1000 + s, rt.store(), 12)).collect();
    let opts = RegisterOptions {
        engine_hint: Some(EngineHint::Batch),
        ..Default::default()
    };
    let ids: Vec<PlanId> = gens
        .iter()
        .map(|g| rt.register_graph(&g.graph, opts).unwrap())
        .collect();
    let gens = Arc::new(gens);
    let total: usize = thread::scope(|s| {
        let hs: Vec<_> = (0..4u64)
            .map(|t| {
                let rt = rt.clone();
                let gens = gens.clone();
                let ids = ids.clone();
                s.spawn(move || {
                    let mut r = rng(t);
                    let mut n = 0;
                    for _ in 0..25 {
                        let p = r.random_range(0..ids.len());
                        let recs: Vec<Record> = (0..r.random_range(1..40)).map(|_| gens[p].record(&mut r)).collect();
                        let h = rt.submit_batch(ids[p], recs.clone()).unwrap();
                        for (rec, got) in recs.iter().zip(h.wait()) {
                            let want = gens[p].interpret(rec);
                            assert!(prediction_matches(&got.unwrap(), &want, 1e-6));
                        }
                        n += recs.len();
                    }
                    n
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum()
    });
    let m = rt.metrics();
    let sched = m.scheduler.expect("scheduler started");
    assert_eq!(sched.completed as usize, total);
    assert_eq!(sched.failed, 0);
    assert_eq!(sched.dependency_violations, 0);
    assert_eq!(m.pool.outstanding, 0);
    assert_eq!(m.pool.acquired, m.pool.released);
    rt.shutdown();
}

#[test]
fn backpressure_fails_records_without_leaking() {
    let rt = batch_runtime(1, 4);
    let g = random_pipeline(7, rt.store(), 12);
    let id = rt.register_graph(&g.graph, RegisterOptions::default()).unwrap();
    let mut r = rng(1);
    let recs: Vec<Record> = (0..2000).map(|_| g.record(&mut r)).collect();
    let handles: Vec<_> = (0..4).map(|_| rt.submit_batch(id, recs.clone()).unwrap()).collect();
    let mut rejected = 0;
    let mut ok = 0;
    for h in handles {
        for res in h.wait() {
            match res {
                Ok(_) => ok += 1,
                Err(RuntimeError::Backpressure) => rejected += 1,
                Err(e) => panic!("{e}"),
            }
        }
    }
    assert!(rejected > 0 && ok > 0, "{ok} ok, {rejected} rejected");
    let m = rt.metrics();
    assert_eq!(m.pool.outstanding, 0);
    assert_eq!(m.pool.acquired, m.pool.released);
    rt.shutdown();
}

#[test]
fn reservation_moves_workers_and_still_serves() {
    let rt = batch_runtime(3, 1 << 14);
    let a = random_pipeline(11, rt.store(), 12);
    let b = random_pipeline(12, rt.store(), 12);
    let ia = rt.register_graph(&a.graph, RegisterOptions::default()).unwrap();
    let ib = rt
        .register_graph(
            &b.graph,
            RegisterOptions {
                reservation: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
    let s = rt.scheduler_handle().expect("reservation starts the scheduler");
    assert_eq!(s.reserved_workers(ib), 1);
    assert_eq!(s.shared_workers(), 2);
    assert_eq!(rt.reservations().len(), 1);
    let mut r = rng(3);
    for (id, g) in [(ia, &a), (ib, &b)] {
        let recs: Vec<Record> = (0..50).map(|_| g.record(&mut r)).collect();
        for (rec, got) in recs.iter().zip(rt.predict_batch(id, &recs).unwrap()) {
            assert!(prediction_matches(&got, &g.interpret(rec), 1e-6));
        }
    }
    assert!(
        rt.reserve(ia, 5).is_err(),
        "cannot reserve more workers than remain shared"
    );
    rt.shutdown();
    assert!(matches!(
        rt.submit_batch(ia, vec![a.record(&mut r)]),
        Err(RuntimeError::Shutdown)
    ));
}
