use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use super::{rss_kib, BenchFleet, Check};
use crate::bundle::{load_bundle, Template};
use crate::runtime::{RegisterOptions, Runtime, RuntimeConfig};
use crate::store::{ObjectStore, StoreConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRow {
    pub plans: usize,
    pub dedup_bytes: u64,
    pub no_dedup_bytes: u64,
    pub dedup_blobs: usize,
    pub no_dedup_blobs: usize,
    /// Decoded parameter views (dictionaries, weights) with dedup on.
    pub decoded_bytes: u64,
    pub stage_instances: usize,
    pub plan_stages: usize,
    pub rss_kib: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MemoryReport {
    pub template: Template,
    pub seed: u64,
    pub rows: Vec<MemoryRow>,
    /// Blob counts by parameter kind with dedup on.
    pub kinds: BTreeMap<&'static str, usize>,
    /// Distinct checksums listed across all manifests.
    pub manifest_checksums: usize,
    pub checks: Vec<Check>,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.rows
            .last()
            .map(|r| r.no_dedup_bytes as f64 / r.dedup_bytes.max(1) as f64)
            .unwrap_or(1.0)
    }
}

/// Loads the fleet twice, into a deduplicating store and a copying one, and
/// records cumulative parameter bytes after each bundle.
pub fn scenario_memory(fleet: &BenchFleet) -> crate::Result<MemoryReport> {
    let on = Arc::new(ObjectStore::new());
    let off = ObjectStore::with_config(StoreConfig {
        dedup: false,
        ..StoreConfig::default()
    });
    let rt = Runtime::new(on.clone(), RuntimeConfig::default());
    let mut rows = Vec::with_capacity(fleet.len());
    let mut listed = BTreeSet::new();
    for (i, b) in fleet.bundles.iter().enumerate() {
        let (g, m) = load_bundle(b, &on)?;
        load_bundle(b, &off)?;
        listed.extend(m.blobs.keys().copied());
        rt.register_graph(&g, RegisterOptions::default())?;
        let (s_on, s_off) = (on.stats(), off.stats());
        let (stage_instances, plan_stages) = rt.with_catalog(|c| (c.stage_instances(), c.plan_stage_total()));
        rows.push(MemoryRow {
            plans: i + 1,
            dedup_bytes: s_on.stored_bytes,
            no_dedup_bytes: s_off.stored_bytes,
            dedup_blobs: s_on.blob_count,
            no_dedup_blobs: s_off.blob_count,
            decoded_bytes: s_on.decoded_bytes,
            stage_instances,
            plan_stages,
            rss_kib: rss_kib(),
        });
    }
    let mut kinds = BTreeMap::new();
    for c in on.checksums() {
        *kinds.entry(on.view(&c)?.kind_name()).or_insert(0) += 1;
    }
    let mut report = MemoryReport {
        template: fleet.spec.template,
        seed: fleet.spec.seed,
        rows,
        kinds,
        manifest_checksums: listed.len(),
        checks: Vec::new(),
    };
    report.checks = checks(fleet, &report, on.blob_count());
    Ok(report)
}

fn checks(fleet: &BenchFleet, r: &MemoryReport, blobs: usize) -> Vec<Check> {
    let mut out = vec![Check::new(
        "blob count equals distinct manifest checksums",
        blobs == r.manifest_checksums,
        format!("store {blobs}, manifests {}", r.manifest_checksums),
    )];
    let n = fleet.len();
    let kind = |k: &str| r.kinds.get(k).copied().unwrap_or(0);
    match fleet.spec.template {
        Template::Sa => {
            let expect = fleet.spec.ngram_versions_used(n);
            out.push(Check::new(
                "n-gram blobs equal dictionary pool",
                kind("ngram") == expect,
                format!(
                    "{} n-gram blobs, expected {expect} (pool {})",
                    kind("ngram"),
                    fleet.spec.pool
                ),
            ));
            out.push(Check::new(
                "one weight blob per plan",
                kind("linear") == n,
                format!("{} weight blobs, {n} plans", kind("linear")),
            ));
        }
        Template::Ac => out.push(Check::new(
            "one tree ensemble per plan",
            kind("trees") == n,
            format!("{} ensembles, {n} plans", kind("trees")),
        )),
    }
    if n > 1 {
        out.push(Check::new(
            "dedup saves at least 5x",
            r.ratio() >= 5.0,
            format!("ratio {:.2}", r.ratio()),
        ));
    } else if let Some(row) = r.rows.first() {
        out.push(Check::new(
            "single bundle: dedup on equals off",
            row.dedup_bytes == row.no_dedup_bytes,
            format!("{} vs {}", row.dedup_bytes, row.no_dedup_bytes),
        ));
    }
    out
}
