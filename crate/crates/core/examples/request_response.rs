// Single-record predictions on the calling thread: cold vs hot latency with and
// without pre-resolved plans, plus pool accounting.

use std::sync::Arc;
use std::time::Instant;

use stageserve::bundle::{generate_fleet, sample_records};
use stageserve::prelude::*;

fn main() {
    let spec = FleetSpec::desk(Template::Ac, 4, 3);
    let records = sample_records(&spec, 1, 200);
    for pre_resolve in [true, false] {
        let config = RuntimeConfig {
            pre_resolve,
            ..Default::default()
        };
        let rt = Runtime::new(Arc::new(ObjectStore::new()), config);
        let fleet = generate_fleet(&spec, rt.store()).unwrap();
        let id = rt.register_graph(&fleet[0].graph, RegisterOptions::default()).unwrap();

        let grown = rt.pool_stats().growth;
        let t = Instant::now();
        let first = rt.predict(id, &records[0]).unwrap();
        let cold = t.elapsed();
        let cold_growth = rt.pool_stats().growth - grown;
        let t = Instant::now();
        for r in &records[1..] {
            rt.predict(id, r).unwrap();
        }
        let hot = t.elapsed() / (records.len() as u32 - 1);
        println!(
            "pre_resolve={pre_resolve}: score {:.4}, cold {cold:?} (pool growth {cold_growth}), hot {hot:?}, outstanding {}",
            first.score,
            rt.pool_stats().outstanding
        );
    }
}
