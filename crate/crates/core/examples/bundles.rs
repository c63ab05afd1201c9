// Writes pipelines to bundle directories, loads them back into a shared store and
// shows that a tampered blob is rejected.

use stageserve::bundle::{read_manifest, write_fleet};
use stageserve::prelude::*;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FleetSpec::desk(Template::Ac, 3, 9);
    let bundles = write_fleet(&spec, dir.path()).unwrap();

    let store = ObjectStore::new();
    for b in &bundles {
        let (graph, m) = load_bundle(b, &store).unwrap();
        println!("{}: {} nodes, {} blobs", m.name, graph.len(), m.blobs.len());
    }
    println!("store holds {} distinct blobs", store.blob_count());

    let m = read_manifest(&bundles[0]).unwrap();
    let (sum, _) = m.blobs.iter().next().unwrap();
    let path = bundles[0].join("blobs").join(sum.to_hex());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    match load_bundle(&bundles[0], &ObjectStore::new()) {
        Ok(_) => println!("tampered bundle loaded?"),
        Err(e) => println!("rejected: {e}"),
    }
}
