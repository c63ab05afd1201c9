// The HTTP surface in-process: register a bundle, send concurrent single-record
// requests through the delayed batcher, and read the metrics.

use std::sync::Arc;

use stageserve::bundle::{sample_records, write_fleet};
use stageserve::frontend::{BatchingConfig, Frontend, PredictionRequest, ResultCacheConfig};
use stageserve::prelude::*;

#[tokio::main]
async fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FleetSpec::desk(Template::Sa, 1, 4).with_dict_size(2000);
    let bundles = write_fleet(&spec, dir.path()).unwrap();

    let rt = Arc::new(Runtime::new(Arc::new(ObjectStore::new()), RuntimeConfig::default()));
    let fe = Arc::new(Frontend::new(
        rt,
        BatchingConfig {
            window_us: 2000,
            max_batch: 32,
        },
        ResultCacheConfig {
            enabled: true,
            entries: 1000,
        },
    ));
    let info = fe.register_bundle(&bundles[0], None).unwrap();
    println!(
        "registered {} as plan {} ({} stages)",
        info.name, info.plan, info.stages
    );

    let records = sample_records(&spec, 1, 16);
    for round in 0..2 {
        let tasks: Vec<_> = records
            .iter()
            .cloned()
            .map(|r| {
                let fe = fe.clone();
                tokio::spawn(async move {
                    fe.predict(PredictionRequest {
                        plan: info.plan,
                        records: vec![r],
                        allow_cache: true,
                    })
                    .await
                    .unwrap()
                })
            })
            .collect();
        let mut cached = 0;
        for t in tasks {
            cached += t.await.unwrap().predictions.iter().filter(|p| p.cached).count();
        }
        println!("round {round}: {cached} of {} served from cache", records.len());
    }
    let m = fe.metrics();
    println!("batcher: {:?}", m.batcher.unwrap());
    println!("result cache: {:?}", m.result_cache.unwrap());
    println!("runtime predictions: {}", m.runtime.predictions);
    println!("(`stageserve serve` exposes the same over HTTP at /predict)");
}
