// Batch submissions through the stage scheduler, with one plan given its own worker.

use std::sync::Arc;

use stageserve::bundle::{generate_fleet, sample_records};
use stageserve::prelude::*;

fn main() {
    let spec = FleetSpec::desk(Template::Sa, 3, 5).with_dict_size(2000);
    let mut config = RuntimeConfig::default();
    config.scheduler.workers = 3;
    let rt = Runtime::new(Arc::new(ObjectStore::new()), config);
    let ids: Vec<PlanId> = generate_fleet(&spec, rt.store())
        .unwrap()
        .iter()
        .map(|m| rt.register_graph(&m.graph, RegisterOptions::default()).unwrap())
        .collect();
    let records = sample_records(&spec, 2, 500);

    rt.reserve(ids[2], 1).unwrap();
    let handles: Vec<_> = ids
        .iter()
        .map(|id| rt.submit_batch(*id, records.clone()).unwrap())
        .collect();
    for (id, h) in ids.iter().zip(handles) {
        let out = h.wait();
        let ok = out.iter().filter(|r| r.is_ok()).count();
        println!("plan {id}: {ok}/{} records in {:?}", out.len(), h.latency().unwrap());
    }
    let sched = rt.scheduler_handle().unwrap();
    println!(
        "shared workers {}, reserved for plan {}: {}",
        sched.shared_workers(),
        ids[2],
        sched.reserved_workers(ids[2])
    );
    let m = sched.metrics();
    println!(
        "completed {}, failed {}, dependency violations {}",
        m.completed, m.failed, m.dependency_violations
    );
    rt.shutdown();
}
