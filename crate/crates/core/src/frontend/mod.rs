//! HTTP entry point: prediction requests with an end-to-end result cache and
//! optional delayed batching, plus admin endpoints. Wire format in
//! `docs/wire-format.md`.

mod batcher;
mod cache;
mod config;
mod http;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{load_bundle, BundleError};
use crate::optimizer::EngineHint;
use crate::runtime::{
    digest_inputs, PlanId, Prediction, Record, RegisterOptions, Runtime, RuntimeError, RuntimeMetrics,
};
use crate::store::{Checksum, ObjectStore};

pub use batcher::{BatcherStats, DelayedBatcher};
pub use cache::{ResultCache, ResultCacheStats};
pub use config::{BatchingConfig, ConfigError, FrontendConfig, ResultCacheConfig};
pub use http::{router, serve};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub plan: PlanId,
    pub records: Vec<Record>,
    #[serde(default = "default_true")]
    pub allow_cache: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServedPrediction {
    #[serde(flatten)]
    pub prediction: Prediction,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub plan: PlanId,
    pub predictions: Vec<ServedPrediction>,
    pub latency_us: u64,
}

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("unknown plan {0}")]
    NotFound(PlanId),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{0}")]
    Internal(String),
}

impl FrontendError {
    pub fn status(&self) -> u16 {
        match self {
            FrontendError::NotFound(_) => 404,
            FrontendError::BadRequest(_) | FrontendError::Bundle(_) => 400,
            FrontendError::Unavailable(_) => 503,
            FrontendError::Internal(_) => 500,
        }
    }
}

impl From<RuntimeError> for FrontendError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::UnknownPlan(p) => FrontendError::NotFound(p),
            RuntimeError::Schema { .. } | RuntimeError::EmptyBatch | RuntimeError::Optimize(_) => {
                FrontendError::BadRequest(e.to_string())
            }
            RuntimeError::Capacity { .. } | RuntimeError::AlreadyReserved(_) => {
                FrontendError::BadRequest(e.to_string())
            }
            RuntimeError::Backpressure | RuntimeError::Shutdown => FrontendError::Unavailable(e.to_string()),
            other => FrontendError::Internal(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub path: PathBuf,
    /// Workers to dedicate to the plan.
    #[serde(default)]
    pub reserve: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanInfo {
    pub plan: PlanId,
    pub name: String,
    pub stages: usize,
    pub engine: EngineHint,
    pub digest: Checksum,
}

#[derive(Clone, Debug, Serialize)]
pub struct FrontendMetrics {
    pub runtime: RuntimeMetrics,
    pub result_cache: Option<ResultCacheStats>,
    pub batcher: Option<BatcherStats>,
}

/// Transport-independent request handling; [`router`] wraps it in HTTP.
#[derive(Debug)]
pub struct Frontend {
    runtime: Arc<Runtime>,
    cache: Option<ResultCache>,
    batcher: Option<DelayedBatcher>,
    names: RwLock<BTreeMap<PlanId, String>>,
}

impl Frontend {
    /// Must be called inside a tokio runtime when batching is enabled.
    pub fn new(runtime: Arc<Runtime>, batching: BatchingConfig, cache: ResultCacheConfig) -> Self {
        let batcher = (batching.window_us > 0).then(|| {
            DelayedBatcher::spawn(
                runtime.clone(),
                Duration::from_micros(batching.window_us),
                batching.max_batch,
            )
        });
        Frontend {
            cache: cache.enabled.then(|| ResultCache::new(cache.entries)),
            batcher,
            runtime,
            names: RwLock::new(BTreeMap::new()),
        }
    }

    /// Builds the store, runtime and frontend from `config` and registers its bundles.
    pub fn from_config(config: &FrontendConfig) -> Result<Self, FrontendError> {
        let store = Arc::new(ObjectStore::with_config(config.store));
        let runtime = Arc::new(Runtime::new(store, config.runtime.clone()));
        let fe = Frontend::new(runtime, config.batching, config.result_cache);
        for b in &config.bundles {
            fe.register_bundle(b, None)?;
        }
        Ok(fe)
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    /// Loads, plans and registers a bundle. Blocking.
    pub fn register_bundle(&self, path: &Path, reserve: Option<usize>) -> Result<PlanInfo, FrontendError> {
        let (graph, manifest) = load_bundle(path, self.runtime.store())?;
        let id = self.runtime.register_graph(
            &graph,
            RegisterOptions {
                reservation: reserve,
                ..Default::default()
            },
        )?;
        let name = if manifest.name.is_empty() {
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        } else {
            manifest.name
        };
        self.names.write().entry(id).or_insert(name);
        self.info(id).ok_or(FrontendError::NotFound(id))
    }

    pub fn info(&self, id: PlanId) -> Option<PlanInfo> {
        let plan = self.runtime.plan(id)?;
        Some(PlanInfo {
            plan: id,
            name: self.names.read().get(&id).cloned().unwrap_or_default(),
            stages: plan.stage_count(),
            engine: self.runtime.engine(id).unwrap_or_default(),
            digest: plan.digest,
        })
    }

    pub fn plans(&self) -> Vec<PlanInfo> {
        self.runtime
            .plan_ids()
            .into_iter()
            .filter_map(|id| self.info(id))
            .collect()
    }

    pub fn metrics(&self) -> FrontendMetrics {
        FrontendMetrics {
            runtime: self.runtime.metrics(),
            result_cache: self.cache.as_ref().map(ResultCache::stats),
            batcher: self.batcher.as_ref().map(DelayedBatcher::stats),
        }
    }

    /// Serves one request: cache lookups, then the misses through the batcher or
    /// the engine the plan prefers.
    pub async fn predict(&self, req: PredictionRequest) -> Result<PredictionResponse, FrontendError> {
        let start = Instant::now();
        let plan = self.runtime.plan(req.plan).ok_or(FrontendError::NotFound(req.plan))?;
        if req.records.is_empty() {
            return Err(RuntimeError::EmptyBatch.into());
        }
        let use_cache = req.allow_cache && self.cache.is_some();
        let mut digests = Vec::with_capacity(req.records.len());
        for r in &req.records {
            let bound = r.bind(&plan.source_schema)?;
            digests.push(use_cache.then(|| digest_inputs(&bound)));
        }
        let mut out: Vec<Option<ServedPrediction>> = vec![None; req.records.len()];
        let mut misses = Vec::new();
        let mut miss_records = Vec::new();
        for (i, (r, d)) in req.records.into_iter().zip(&digests).enumerate() {
            let hit = d.and_then(|d| self.cache.as_ref().and_then(|c| c.get(req.plan, d)));
            match hit {
                Some(p) => {
                    out[i] = Some(ServedPrediction {
                        prediction: p,
                        cached: true,
                    })
                }
                None => {
                    misses.push(i);
                    miss_records.push(r);
                }
            }
        }
        if !miss_records.is_empty() {
            let results = self.dispatch(req.plan, miss_records).await?;
            for (i, res) in misses.into_iter().zip(results) {
                let p = res?;
                if let (Some(c), Some(d)) = (&self.cache, digests[i]) {
                    c.insert(req.plan, d, p);
                }
                out[i] = Some(ServedPrediction {
                    prediction: p,
                    cached: false,
                });
            }
        }
        Ok(PredictionResponse {
            plan: req.plan,
            predictions: out.into_iter().map(|p| p.expect("every slot filled")).collect(),
            latency_us: start.elapsed().as_micros() as u64,
        })
    }

    async fn dispatch(
        &self,
        plan: PlanId,
        records: Vec<Record>,
    ) -> Result<Vec<Result<Prediction, RuntimeError>>, FrontendError> {
        if let Some(b) = &self.batcher {
            return Ok(b.submit(plan, records).await);
        }
        let rt = self.runtime.clone();
        let inline = records.len() == 1 && rt.engine(plan) != Some(EngineHint::Batch);
        tokio::task::spawn_blocking(move || {
            if inline {
                Ok(vec![rt.predict(plan, &records[0])])
            } else {
                rt.submit_batch(plan, records).map(|h| h.wait())
            }
        })
        .await
        .map_err(|e| FrontendError::Internal(e.to_string()))?
        .map_err(FrontendError::from)
    }
}
