// Loads a fleet of pipelines that reuse a few dictionaries into one store and
// reports how much is shared.

use std::sync::Arc;

use stageserve::bundle::generate_fleet;
use stageserve::prelude::*;

fn main() {
    let spec = FleetSpec::desk(Template::Sa, 20, 7).with_dict_size(2000);
    let shared = Arc::new(ObjectStore::new());
    let copying = ObjectStore::with_config(StoreConfig {
        dedup: false,
        ..StoreConfig::default()
    });
    let rt = Runtime::new(shared.clone(), RuntimeConfig::default());
    for m in generate_fleet(&spec, &shared).unwrap() {
        rt.register_graph(&m.graph, RegisterOptions::default()).unwrap();
    }
    generate_fleet(&spec, &copying).unwrap();

    let (on, off) = (shared.stats(), copying.stats());
    println!("blobs: {} shared vs {} copied", on.blob_count, off.blob_count);
    println!(
        "bytes: {} shared vs {} copied ({:.1}x)",
        on.stored_bytes,
        off.stored_bytes,
        off.stored_bytes as f64 / on.stored_bytes as f64
    );
    let m = rt.metrics();
    println!(
        "stage instances: {} for {} plan stages",
        m.stage_instances, m.plan_stages
    );
}
