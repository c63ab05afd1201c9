// Plans sharing a featurization prefix reuse each other's cached stage outputs.

use std::sync::Arc;
use std::time::Instant;

use stageserve::bundle::{generate_fleet, sample_records};
use stageserve::prelude::*;

fn main() {
    let spec = FleetSpec::desk(Template::Sa, 8, 2).with_dict_size(4000);
    let records = sample_records(&spec, 3, 50);
    for on in [false, true] {
        let config = RuntimeConfig {
            materialization: on,
            ..Default::default()
        };
        let rt = Runtime::new(Arc::new(ObjectStore::new()), config);
        let ids: Vec<PlanId> = generate_fleet(&spec, rt.store())
            .unwrap()
            .iter()
            .map(|m| rt.register_graph(&m.graph, RegisterOptions::default()).unwrap())
            .collect();
        let t = Instant::now();
        for r in &records {
            for id in &ids {
                rt.predict(*id, r).unwrap();
            }
        }
        let per = t.elapsed() / (records.len() * ids.len()) as u32;
        let c = rt.metrics().cache;
        println!(
            "materialization={on}: {per:?} per prediction, cache hits {} misses {} ({} bytes)",
            c.hits, c.misses, c.bytes
        );
    }
}
