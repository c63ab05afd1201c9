//! On-disk pipeline bundles: `manifest.json` describing the transform graph, plus
//! `blobs/<sha256-hex>` holding each parameter payload. See `docs/bundle-format.md`.

mod fleet;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{IrError, NodeId, Schema, TransformGraph, TransformNode};
use crate::store::{Checksum, ObjectStore, StoreError};

pub use fleet::{
    ac_graph, ac_schema, generate_fleet, read_fleet_spec, sa_graph, sa_schema, sample_records, write_fleet,
    FleetMember, FleetSpec, Template, Vocabulary, AC_FEATURES, DESK_DICT_SIZE, FULL_DICT_SIZE,
};

pub const FORMAT: &str = "stageserve-bundle";
pub const VERSION: u32 = 1;

const KINDS: &[&str] = &[
    "CsvSource",
    "Select",
    "Tokenize",
    "CharNgram",
    "WordNgram",
    "Concat",
    "NormalizeL2",
    "PcaProject",
    "KMeansFeaturize",
    "TreeEnsemble",
    "LinearBinaryClassifier",
];

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed manifest: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: unsupported bundle version {found} (expected {VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: node {node} has unknown kind `{kind}`")]
    UnknownKind { path: PathBuf, node: u32, kind: String },
    #[error("{path}: digest mismatch, contents hash to {actual}")]
    Digest { path: PathBuf, actual: Checksum },
    #[error("parameter blob {0} is missing from the store")]
    MissingBlob(Checksum),
    #[error(transparent)]
    Graph(#[from] IrError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub kind: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub input_schema: Schema,
    pub sink: NodeId,
    pub nodes: Vec<TransformNode>,
    pub blobs: BTreeMap<Checksum, BlobEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Builds the manifest for `graph`; every referenced parameter must be in `store`.
pub fn manifest(graph: &TransformGraph, store: &ObjectStore, name: &str) -> Result<Manifest, BundleError> {
    let sink = graph.sink().ok_or(IrError::EmptyGraph)?;
    let input_schema = graph.source_schema().cloned().ok_or(IrError::SourceCount(0))?;
    let mut blobs = BTreeMap::new();
    for n in graph.nodes() {
        if let Some(sum) = n.params {
            let view = store.view(&sum)?;
            let bytes = store.get(&sum).ok_or(BundleError::MissingBlob(sum))?.bytes().len();
            blobs.insert(
                sum,
                BlobEntry {
                    kind: view.kind_name().to_string(),
                    bytes,
                },
            );
        }
    }
    Ok(Manifest {
        format: FORMAT.into(),
        version: VERSION,
        name: name.into(),
        input_schema,
        sink,
        nodes: graph.nodes().cloned().collect(),
        blobs,
    })
}

/// Writes `graph` as a bundle directory at `dir`.
pub fn save_bundle(
    graph: &TransformGraph,
    store: &ObjectStore,
    dir: &Path,
    name: &str,
) -> Result<Manifest, BundleError> {
    let m = manifest(graph, store, name)?;
    let blob_dir = dir.join("blobs");
    fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
    for sum in m.blobs.keys() {
        let path = blob_dir.join(sum.to_hex());
        let blob = store.get(sum).ok_or(BundleError::MissingBlob(*sum))?;
        fs::write(&path, blob.bytes()).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(m)
}

/// Parses and checks a manifest without touching blobs.
pub fn read_manifest(dir: &Path) -> Result<Manifest, BundleError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let malformed = |reason: String| BundleError::Manifest {
        path: path.clone(),
        reason,
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(malformed(format!("`format` must be \"{FORMAT}\"")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing `version`".into()))?;
    if version != VERSION as u64 {
        return Err(BundleError::Version {
            path: path.clone(),
            found: version as u32,
        });
    }
    if let Some(nodes) = raw.get("nodes").and_then(|n| n.as_array()) {
        for n in nodes {
            let kind = n.get("kind").and_then(|k| k.as_str()).unwrap_or("");
            if !KINDS.contains(&kind) {
                return Err(BundleError::UnknownKind {
                    path: path.clone(),
                    node: n.get("id").and_then(|i| i.as_u64()).unwrap_or(0) as u32,
                    kind: kind.into(),
                });
            }
        }
    }
    serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))
}

/// Loads a bundle, verifying every blob's digest and adding it to `store`. Blobs
/// already in the store are shared, not duplicated, unless the store has dedup off.
pub fn load_bundle(dir: &Path, store: &ObjectStore) -> Result<(TransformGraph, Manifest), BundleError> {
    let m = read_manifest(dir)?;
    for sum in m.blobs.keys() {
        let path = dir.join("blobs").join(sum.to_hex());
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = Checksum::of(&bytes);
        if actual != *sum {
            return Err(BundleError::Digest { path, actual });
        }
        store.put_params(&bytes)?;
    }
    for n in &m.nodes {
        if let Some(sum) = n.params {
            if !m.blobs.contains_key(&sum) {
                return Err(BundleError::Manifest {
                    path: dir.join("manifest.json"),
                    reason: format!("node {} references unlisted blob {sum}", n.id),
                });
            }
        }
    }
    let graph = TransformGraph::from_parts(m.nodes.clone(), m.sink)?;
    Ok((graph, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_graph() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Sa, 1, 7).with_dict_size(200);
        let g = sa_graph(&spec, &store, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&g, &store, dir.path(), "sa").unwrap();
        let other = ObjectStore::new();
        let (back, m) = load_bundle(dir.path(), &other).unwrap();
        assert_eq!(back, g);
        assert_eq!(m.nodes.len(), 7);
        assert_eq!(other.checksums(), store.checksums());
    }

    #[test]
    fn corrupt_blob_names_file() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Sa, 1, 7).with_dict_size(200);
        let g = sa_graph(&spec, &store, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_bundle(&g, &store, dir.path(), "sa").unwrap();
        let victim = dir.path().join("blobs").join(m.blobs.keys().next().unwrap().to_hex());
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        fs::write(&victim, bytes).unwrap();
        let err = load_bundle(dir.path(), &ObjectStore::new()).unwrap_err();
        assert!(matches!(err, BundleError::Digest { .. }));
        assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
    }

    #[test]
    fn rejects_unknown_kind_and_version() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Sa, 1, 7).with_dict_size(200);
        let g = sa_graph(&spec, &store, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&g, &store, dir.path(), "sa").unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"Tokenize\"", "\"Stemmer\"", 1)).unwrap();
        assert!(matches!(
            load_bundle(dir.path(), &ObjectStore::new()),
            Err(BundleError::UnknownKind { .. })
        ));
        fs::write(&path, text.replacen("\"version\": 1", "\"version\": 9", 1)).unwrap();
        assert!(matches!(
            load_bundle(dir.path(), &ObjectStore::new()),
            Err(BundleError::Version { found: 9, .. })
        ));
    }
}
