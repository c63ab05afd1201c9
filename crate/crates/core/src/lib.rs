//! White-box prediction serving for classical ML pipelines.
//!
//! Pipelines are authored as DAGs of typed transformations ([`ir`]), rewritten by a
//! rule-based optimizer into fused stages ([`optimizer`]), bound to ahead-of-time
//! kernels ([`ops`]) and served by a runtime that shares parameters across plans
//! ([`store`]), pools vectors per worker ([`runtime`]) and schedules stage events over
//! two priority queues ([`scheduler`]). [`frontend`] exposes the HTTP entry point and
//! [`bench`] reproduces the memory, latency, throughput and heavy-load scenarios.
//!
//! ```no_run
//! use stageserve::prelude::*;
//!
//! let store = std::sync::Arc::new(ObjectStore::new());
//! let builder = PipelineBuilder::new(&store);
//! let schema = Schema::new(vec![Column::new("Text", DataType::Text)]).unwrap();
//! # let (tok, chars, words, linear): (TokenizerParams, NgramParams, NgramParams, LinearParams) = todo!();
//! let tokens = builder.csv(schema, ',').unwrap().select("Text").unwrap().tokenize(&tok).unwrap();
//! let c = tokens.char_ngram(&chars).unwrap();
//! let w = tokens.word_ngram(&words).unwrap();
//! let plan = c.concat(&[&w]).unwrap().linear_classifier(&linear).unwrap().plan().unwrap();
//! assert_eq!(plan.logical.stages.len(), 2);
//! ```

pub mod alloc_counter;
pub mod bench;
pub mod bundle;
pub mod error;
pub mod frontend;
pub mod ir;
pub mod ops;
pub mod optimizer;
pub mod params;
pub mod runtime;
pub mod scheduler;
pub mod store;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::bundle::{load_bundle, save_bundle, FleetSpec, Template};
    pub use crate::ir::{
        Column, DataType, Density, NodeId, PipelineBuilder, Schema, Stream, TrainingStats, TransformGraph,
        TransformKind,
    };
    pub use crate::optimizer::{plan, EngineHint, ModelPlan};
    pub use crate::params::{
        Aggregate, KMeansParams, LinearParams, NgramParams, Params, PcaParams, TokenizerParams, Tree,
        TreeEnsembleParams, TreeNode,
    };
    pub use crate::runtime::{PlanId, Prediction, Record, RegisterOptions, Reservation, Runtime, RuntimeConfig, Value};
    pub use crate::store::{Checksum, ObjectStore, StoreConfig};
}
