// Counts heap allocations on the request-response path once pools are warm.

use std::sync::Arc;

use stageserve::alloc_counter::{self, CountingAlloc};
use stageserve::bundle::{generate_fleet, sample_records};
use stageserve::prelude::*;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    let spec = FleetSpec::desk(Template::Sa, 4, 1).with_dict_size(2000);
    let config = RuntimeConfig {
        materialization: false,
        ..Default::default()
    };
    let rt = Runtime::new(Arc::new(ObjectStore::new()), config);
    let ids: Vec<PlanId> = generate_fleet(&spec, rt.store())
        .unwrap()
        .iter()
        .map(|m| rt.register_graph(&m.graph, RegisterOptions::default()).unwrap())
        .collect();
    let records = sample_records(&spec, 8, 32);

    let (_, cold) = alloc_counter::count(|| rt.predict(ids[0], &records[0]).unwrap());
    for id in &ids {
        for r in &records[..10] {
            rt.predict(*id, r).unwrap();
        }
    }
    let (_, hot) = alloc_counter::count(|| {
        for i in 0..1000 {
            rt.predict(ids[i % ids.len()], &records[i % records.len()]).unwrap();
        }
    });
    println!("first prediction: {cold} allocations; 1000 warm predictions: {hot} allocations");
    println!("pool: {:?}", rt.pool_stats());
}
