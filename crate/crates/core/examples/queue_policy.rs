// Simulates a burst of multi-stage instances under the two-queue and FIFO
// policies and compares in-flight vectors.

use stageserve::scheduler::sim::{simulate, Trace};
use stageserve::scheduler::QueuePolicy;

fn main() {
    let trace = Trace::burst(8, 4, 2);
    for policy in [QueuePolicy::TwoQueue, QueuePolicy::Fifo] {
        let r = simulate(&trace, policy, 64);
        println!(
            "{policy:?}: makespan {}, vector high water {}, completed {}, dependency violations {}",
            r.makespan, r.vector_high_water, r.completed, r.dependency_violations
        );
    }
    let random = Trace::random(5, 40);
    let r = simulate(&random, QueuePolicy::TwoQueue, 4);
    println!(
        "random trace: {} instances on {} workers, makespan {}, priority violations {}",
        random.instances.len(),
        random.workers,
        r.makespan,
        r.priority_violations
    );
}
