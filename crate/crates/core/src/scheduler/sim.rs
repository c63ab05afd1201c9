//! Sequential discrete-time simulator of the scheduling policy. Uses the same queue and
//! dependency logic as the threaded scheduler, so traces can be checked exhaustively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::queue::{EventQueues, InstanceState, Priority, QueuePolicy};

#[derive(Clone, Debug)]
pub struct SimInstance {
    pub arrival: u64,
    /// `deps[i]`: bitmask of stages preceding stage `i`.
    pub deps: Vec<u64>,
    pub durations: Vec<u64>,
    /// Vectors held from first dequeue until the last stage completes.
    pub vectors: usize,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub workers: usize,
    pub instances: Vec<SimInstance>,
}

/// Random DAG over `n` stages: each stage depends on a random subset of earlier ones.
fn random_deps(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| {
            let mut m = 0u64;
            for d in 0..i {
                if rng.random_bool(0.5) {
                    m |= 1 << d;
                }
            }
            m
        })
        .collect()
}

impl Trace {
    pub fn random(seed: u64, instances: usize) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let workers = rng.random_range(1..=6);
        let mut t = 0;
        let instances = (0..instances)
            .map(|_| {
                t += rng.random_range(0..4);
                let n = rng.random_range(1..=5);
                SimInstance {
                    arrival: t,
                    deps: random_deps(&mut rng, n),
                    durations: (0..n).map(|_| rng.random_range(1..6)).collect(),
                    vectors: rng.random_range(1..4),
                }
            })
            .collect();
        Trace { workers, instances }
    }

    /// Everything arrives at once: chains of `stages` stages.
    pub fn burst(instances: usize, stages: usize, workers: usize) -> Trace {
        Trace {
            workers,
            instances: (0..instances)
                .map(|_| SimInstance {
                    arrival: 0,
                    deps: (0..stages).map(|i| if i == 0 { 0 } else { 1 << (i - 1) }).collect(),
                    durations: vec![1; stages],
                    vectors: stages,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimReport {
    pub completed: usize,
    pub dependency_violations: usize,
    /// Low-priority dequeues while a high-priority event was waiting.
    pub priority_violations: usize,
    pub acquired: usize,
    pub released: usize,
    pub vector_high_water: usize,
    pub makespan: u64,
    /// Stage execution order per instance.
    pub orders: Vec<Vec<usize>>,
    /// `(stage, start, finish)` per instance, in start order.
    pub timeline: Vec<Vec<(usize, u64, u64)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Ev {
    inst: usize,
    stage: usize,
}

/// Runs `trace` to completion under `policy` with queue bound `bound`.
pub fn simulate(trace: &Trace, policy: QueuePolicy, bound: usize) -> SimReport {
    let n = trace.instances.len();
    let mut q: EventQueues<Ev> = EventQueues::new(policy, bound.max(1));
    let mut states: Vec<InstanceState> = trace
        .instances
        .iter()
        .map(|i| InstanceState::new(i.deps.clone()))
        .collect();
    let mut started = vec![false; n];
    let mut outstanding_events = vec![0usize; n];
    let mut report = SimReport {
        orders: vec![Vec::new(); n],
        timeline: vec![Vec::new(); n],
        ..SimReport::default()
    };
    let mut held = 0usize;
    // (finish time, event) per worker.
    let mut busy: Vec<Option<(u64, Ev)>> = vec![None; trace.workers.max(1)];
    let mut next_arrival = 0usize;
    let mut t = 0u64;
    let mut admitted = vec![false; n];
    while report.completed < n {
        // Completions at time t.
        for w in busy.iter_mut() {
            if let Some((fin, ev)) = *w {
                if fin <= t {
                    *w = None;
                    let ready = states[ev.inst].complete(ev.stage);
                    outstanding_events[ev.inst] -= 1;
                    for s in ready {
                        outstanding_events[ev.inst] += 1;
                        q.push(
                            Ev {
                                inst: ev.inst,
                                stage: s,
                            },
                            Priority::High,
                        )
                        .expect("high is unbounded");
                    }
                    if outstanding_events[ev.inst] == 0 && states[ev.inst].is_done() {
                        report.completed += 1;
                        report.released += trace.instances[ev.inst].vectors;
                        held -= trace.instances[ev.inst].vectors;
                    }
                }
            }
        }
        // Arrivals, with backpressure retrying on the next tick.
        while next_arrival < n && trace.instances[next_arrival].arrival <= t {
            let i = next_arrival;
            let heads: Vec<usize> = states[i].heads().collect();
            let evs = heads.iter().map(|s| Ev { inst: i, stage: *s });
            if q.push_heads(evs).is_err() {
                break;
            }
            admitted[i] = true;
            outstanding_events[i] = heads.len();
            next_arrival += 1;
        }
        // Idle workers dequeue.
        for w in busy.iter_mut() {
            if w.is_some() {
                continue;
            }
            let had_high = q.has_high();
            let Some((ev, p)) = q.pop() else { break };
            if policy == QueuePolicy::TwoQueue && had_high && p == Priority::Low {
                report.priority_violations += 1;
            }
            if !states[ev.inst].is_ready(ev.stage) {
                report.dependency_violations += 1;
            }
            if !started[ev.inst] {
                started[ev.inst] = true;
                report.acquired += trace.instances[ev.inst].vectors;
                held += trace.instances[ev.inst].vectors;
                report.vector_high_water = report.vector_high_water.max(held);
            }
            let fin = t + trace.instances[ev.inst].durations[ev.stage];
            report.orders[ev.inst].push(ev.stage);
            report.timeline[ev.inst].push((ev.stage, t, fin));
            *w = Some((fin, ev));
        }
        t += 1;
        if t > 1_000_000_000 {
            break;
        }
    }
    debug_assert!(admitted.iter().all(|a| *a));
    report.makespan = t;
    report
}

/// Whether `order` runs every stage once, after all of its dependencies.
pub fn respects_deps(deps: &[u64], order: &[usize]) -> bool {
    let mut done = 0u64;
    for s in order {
        if done & (1 << s) != 0 || done & deps[*s] != deps[*s] {
            return false;
        }
        done |= 1 << s;
    }
    done.count_ones() as usize == deps.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_traces_are_safe_and_live() {
        for seed in 0..200 {
            let trace = Trace::random(seed, 20);
            for policy in [QueuePolicy::TwoQueue, QueuePolicy::Fifo] {
                let r = simulate(&trace, policy, 8);
                assert_eq!(r.completed, 20);
                assert_eq!(r.dependency_violations, 0);
                assert_eq!(r.priority_violations, 0);
                assert_eq!(r.acquired, r.released);
                for (inst, order) in trace.instances.iter().zip(&r.orders) {
                    assert!(respects_deps(&inst.deps, order));
                }
            }
        }
    }

    #[test]
    fn two_queues_return_memory_sooner() {
        let trace = Trace::burst(100, 4, 4);
        let two = simulate(&trace, QueuePolicy::TwoQueue, 1000);
        let fifo = simulate(&trace, QueuePolicy::Fifo, 1000);
        assert!(two.vector_high_water < fifo.vector_high_water, "{two:?} vs {fifo:?}");
    }
}
