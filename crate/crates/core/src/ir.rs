//! Pipeline intermediate representation.
//!
//! A [`TransformGraph`] is a value: every append returns a new graph and leaves the
//! receiver untouched, so partially built pipelines can be captured and branched
//! freely. [`PipelineBuilder`] wraps the raw API in a fluent interface that stores
//! parameters in an [`ObjectStore`] as it goes.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optimizer::{self, ModelPlan};
use crate::params::{
    KMeansParams, LinearParams, NgramParams, ParamView, Params, PcaParams, TokenizerParams, TreeEnsembleParams,
};
use crate::store::{Checksum, ObjectStore, StoreError};

/// Token bound used when a Tokenize node carries no training statistics.
pub const DEFAULT_MAX_TOKENS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Dense,
    Sparse,
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::Dense => "dense",
            Density::Sparse => "sparse",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataType {
    Text,
    Tokens,
    Scalar,
    Vector { density: Density, len: usize },
}

impl DataType {
    pub fn vector(density: Density, len: usize) -> Result<Self, IrError> {
        if len == 0 {
            return Err(IrError::ZeroLengthVector);
        }
        Ok(DataType::Vector { density, len })
    }

    pub fn vector_len(&self) -> Option<usize> {
        match self {
            DataType::Vector { len, .. } => Some(*len),
            _ => None,
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataType::Text => f.write_str("Text"),
            DataType::Tokens => f.write_str("Token-sequence"),
            DataType::Scalar => f.write_str("Float-scalar"),
            DataType::Vector { density, len } => write!(f, "Float-vector({density}, {len})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub dtype: DataType,
}

impl Column {
    pub fn new(name: impl Into<String>, dtype: DataType) -> Self {
        Column {
            name: name.into(),
            dtype,
        }
    }
}

/// Ordered, uniquely named columns. Order matters: Concat offsets follow it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Column>", into = "Vec<Column>")]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self, IrError> {
        let mut seen = BTreeSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(IrError::DuplicateColumn(c.name.clone()));
            }
            if let DataType::Vector { len: 0, .. } = c.dtype {
                return Err(IrError::ZeroLengthVector);
            }
        }
        Ok(Schema { columns })
    }

    pub fn single(name: impl Into<String>, dtype: DataType) -> Self {
        Schema {
            columns: vec![Column::new(name, dtype)],
        }
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<(usize, &Column)> {
        self.columns.iter().enumerate().find(|(_, c)| c.name == name)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

impl TryFrom<Vec<Column>> for Schema {
    type Error = IrError;
    fn try_from(columns: Vec<Column>) -> Result<Self, IrError> {
        Schema::new(columns)
    }
}

impl From<Schema> for Vec<Column> {
    fn from(s: Schema) -> Self {
        s.columns
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingStats {
    pub max_vector_size: usize,
    pub density: Density,
    pub vectorizable: bool,
}

impl TrainingStats {
    pub fn new(max_vector_size: usize, density: Density, vectorizable: bool) -> Self {
        TrainingStats {
            max_vector_size,
            density,
            vectorizable,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TransformKind {
    CsvSource { schema: Schema, separator: char },
    Select { column: String },
    Tokenize,
    CharNgram,
    WordNgram,
    Concat,
    NormalizeL2,
    PcaProject,
    KMeansFeaturize,
    TreeEnsemble,
    LinearBinaryClassifier,
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::CsvSource { .. } => "CsvSource",
            TransformKind::Select { .. } => "Select",
            TransformKind::Tokenize => "Tokenize",
            TransformKind::CharNgram => "CharNgram",
            TransformKind::WordNgram => "WordNgram",
            TransformKind::Concat => "Concat",
            TransformKind::NormalizeL2 => "NormalizeL2",
            TransformKind::PcaProject => "PcaProject",
            TransformKind::KMeansFeaturize => "KMeansFeaturize",
            TransformKind::TreeEnsemble => "TreeEnsemble",
            TransformKind::LinearBinaryClassifier => "LinearBinaryClassifier",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        !matches!(
            self,
            TransformKind::CsvSource { .. }
                | TransformKind::Select { .. }
                | TransformKind::Concat
                | TransformKind::NormalizeL2
        )
    }

    pub fn is_predictor(&self) -> bool {
        matches!(
            self,
            TransformKind::TreeEnsemble | TransformKind::LinearBinaryClassifier
        )
    }

    fn check_arity(&self, node: NodeId, got: usize) -> Result<(), IrError> {
        let (ok, expected) = match self {
            TransformKind::CsvSource { .. } => (got == 0, "0"),
            TransformKind::Concat => (got >= 2, ">=2"),
            _ => (got == 1, "1"),
        };
        if ok {
            Ok(())
        } else {
            Err(IrError::Arity {
                node,
                kind: self.name(),
                expected,
                got,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: TransformKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Checksum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<TrainingStats>,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("node {node}: unknown parent {parent}")]
    UnknownParent { node: NodeId, parent: NodeId },
    #[error("node {node} ({kind}): expected {expected} inputs, got {got}")]
    Arity {
        node: NodeId,
        kind: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("duplicate column name `{0}`")]
    DuplicateColumn(String),
    #[error("vector types must have a positive length")]
    ZeroLengthVector,
    #[error("node {node} ({kind}) requires a parameter reference")]
    MissingParams { node: NodeId, kind: &'static str },
    #[error("node {node} ({kind}) takes no parameters")]
    UnexpectedParams { node: NodeId, kind: &'static str },
    #[error("node {node}: parameters {checksum} are not in the object store")]
    UnresolvedParams { node: NodeId, checksum: Checksum },
    #[error("node {node} ({kind}): parameters have the wrong type ({found})")]
    WrongParams {
        node: NodeId,
        kind: &'static str,
        found: &'static str,
    },
    #[error("node {node}: undecodable parameters: {reason}")]
    BadParams { node: NodeId, reason: String },
    #[error("node {node} ({kind}): expected {expected} input, found {found}")]
    TypeMismatch {
        node: NodeId,
        kind: &'static str,
        expected: &'static str,
        found: String,
    },
    #[error("node {node} ({kind}): input length {found} does not match parameter dimension {expected}")]
    DimensionMismatch {
        node: NodeId,
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("node {node}: column `{column}` not found in input schema")]
    UnknownColumn { node: NodeId, column: String },
    #[error("node {node}: n-gram dictionary is empty")]
    EmptyDictionary { node: NodeId },
    #[error("node {node}: stats max_vector_size {declared} is below output length {required}")]
    StatsTooSmall {
        node: NodeId,
        declared: usize,
        required: usize,
    },
    #[error("graph has no final predictor (sink {sink:?})")]
    MissingPredictor { sink: Option<NodeId> },
    #[error("graph must contain exactly one CsvSource, found {0}")]
    SourceCount(usize),
    #[error("graph contains a cycle through {0}")]
    Cycle(NodeId),
    #[error("graph is empty")]
    EmptyGraph,
}

/// A DAG of transformations with a single sink (the most recently appended node).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransformGraph {
    nodes: Arc<BTreeMap<NodeId, TransformNode>>,
    sink: Option<NodeId>,
}

impl TransformGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a graph from parts, e.g. a loaded manifest. No validation beyond
    /// id consistency; run [`propagate_schemas`] before trusting it.
    pub fn from_parts(nodes: Vec<TransformNode>, sink: NodeId) -> Result<Self, IrError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(IrError::DuplicateNode(id));
            }
        }
        for n in map.values() {
            for p in &n.inputs {
                if !map.contains_key(p) {
                    return Err(IrError::UnknownParent { node: n.id, parent: *p });
                }
            }
        }
        Ok(TransformGraph {
            nodes: Arc::new(map),
            sink: Some(sink),
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TransformNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&TransformNode> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sink(&self) -> Option<NodeId> {
        self.sink
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |n| n.0 + 1))
    }

    /// Appends a node with the next free id. The receiver is not modified.
    pub fn append(
        &self,
        kind: TransformKind,
        params: Option<Checksum>,
        stats: Option<TrainingStats>,
        inputs: &[NodeId],
    ) -> Result<(TransformGraph, NodeId), IrError> {
        let id = self.next_id();
        self.append_as(id, kind, params, stats, inputs).map(|g| (g, id))
    }

    pub fn append_as(
        &self,
        id: NodeId,
        kind: TransformKind,
        params: Option<Checksum>,
        stats: Option<TrainingStats>,
        inputs: &[NodeId],
    ) -> Result<TransformGraph, IrError> {
        if self.nodes.contains_key(&id) {
            return Err(IrError::DuplicateNode(id));
        }
        for p in inputs {
            if !self.nodes.contains_key(p) {
                return Err(IrError::UnknownParent { node: id, parent: *p });
            }
        }
        kind.check_arity(id, inputs.len())?;
        match (kind.is_parameterized(), params.is_some()) {
            (true, false) => {
                return Err(IrError::MissingParams {
                    node: id,
                    kind: kind.name(),
                })
            }
            (false, true) => {
                return Err(IrError::UnexpectedParams {
                    node: id,
                    kind: kind.name(),
                })
            }
            _ => {}
        }
        let mut nodes = (*self.nodes).clone();
        nodes.insert(
            id,
            TransformNode {
                id,
                kind,
                params,
                stats,
                inputs: inputs.to_vec(),
            },
        );
        Ok(TransformGraph {
            nodes: Arc::new(nodes),
            sink: Some(id),
        })
    }

    /// Replaces the stats of an existing node.
    pub fn with_stats(&self, id: NodeId, stats: TrainingStats) -> Option<TransformGraph> {
        let mut nodes = (*self.nodes).clone();
        nodes.get_mut(&id)?.stats = Some(stats);
        Some(TransformGraph {
            nodes: Arc::new(nodes),
            sink: self.sink,
        })
    }

    /// Union of two graphs built from the same id space.
    fn merge(&self, other: &TransformGraph, sink: NodeId) -> TransformGraph {
        let mut nodes = (*self.nodes).clone();
        for (id, n) in other.nodes.iter() {
            nodes.entry(*id).or_insert_with(|| n.clone());
        }
        TransformGraph {
            nodes: Arc::new(nodes),
            sink: Some(sink),
        }
    }

    pub fn consumers(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .values()
            .filter(move |n| n.inputs.contains(&id))
            .map(|n| n.id)
    }

    pub fn source_schema(&self) -> Option<&Schema> {
        self.nodes.values().find_map(|n| match &n.kind {
            TransformKind::CsvSource { schema, .. } => Some(schema),
            _ => None,
        })
    }
}

/// Schemas and resolved statistics for every node of a validated graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedGraph {
    pub schemas: BTreeMap<NodeId, Schema>,
    pub stats: BTreeMap<NodeId, TrainingStats>,
}

/// Assigns an output schema to every node, validating kind semantics and graph shape.
pub fn propagate_schemas(
    graph: &TransformGraph,
    store: &ObjectStore,
) -> Result<BTreeMap<NodeId, Schema>, optimizer::OptimizeError> {
    optimizer::validate_input(graph, store).map(|t| t.schemas)
}

fn output_name(id: NodeId) -> String {
    format!("{id}")
}

fn single_input<'a>(
    node: &TransformNode,
    inputs: &'a [&Schema],
    expected: &'static str,
) -> Result<&'a DataType, IrError> {
    match inputs {
        [s] if s.len() == 1 => Ok(&s.columns()[0].dtype),
        [s] => Err(IrError::TypeMismatch {
            node: node.id,
            kind: node.kind.name(),
            expected,
            found: format!("{}-column schema", s.len()),
        }),
        _ => Err(IrError::Arity {
            node: node.id,
            kind: node.kind.name(),
            expected: "1",
            got: inputs.len(),
        }),
    }
}

fn expect_vector(node: &TransformNode, dt: &DataType) -> Result<(Density, usize), IrError> {
    match dt {
        DataType::Vector { density, len } => Ok((*density, *len)),
        other => Err(IrError::TypeMismatch {
            node: node.id,
            kind: node.kind.name(),
            expected: "Float-vector",
            found: other.to_string(),
        }),
    }
}

fn expect_dim(node: &TransformNode, expected: usize, found: usize) -> Result<(), IrError> {
    if expected == found {
        Ok(())
    } else {
        Err(IrError::DimensionMismatch {
            node: node.id,
            kind: node.kind.name(),
            expected,
            found,
        })
    }
}

pub(crate) fn resolve_params(node: &TransformNode, store: &ObjectStore) -> Result<Option<Arc<ParamView>>, IrError> {
    let Some(sum) = node.params else {
        if node.kind.is_parameterized() {
            return Err(IrError::MissingParams {
                node: node.id,
                kind: node.kind.name(),
            });
        }
        return Ok(None);
    };
    if !node.kind.is_parameterized() {
        return Err(IrError::UnexpectedParams {
            node: node.id,
            kind: node.kind.name(),
        });
    }
    match store.view(&sum) {
        Ok(v) => Ok(Some(v)),
        Err(StoreError::NotFound(_)) => Err(IrError::UnresolvedParams {
            node: node.id,
            checksum: sum,
        }),
        Err(e) => Err(IrError::BadParams {
            node: node.id,
            reason: e.to_string(),
        }),
    }
}

fn wrong_params(node: &TransformNode, view: &ParamView) -> IrError {
    IrError::WrongParams {
        node: node.id,
        kind: node.kind.name(),
        found: view.kind_name(),
    }
}

/// Output type and resolved stats of one node given its input schemas.
pub(crate) fn infer_output(
    node: &TransformNode,
    inputs: &[&Schema],
    store: &ObjectStore,
) -> Result<(Schema, TrainingStats), IrError> {
    node.kind.check_arity(node.id, inputs.len())?;
    let params = resolve_params(node, store)?;
    let name = output_name(node.id);
    let (schema, natural) = match &node.kind {
        TransformKind::CsvSource { schema, .. } => {
            let widest = schema
                .columns()
                .iter()
                .filter_map(|c| c.dtype.vector_len())
                .max()
                .unwrap_or(1);
            (schema.clone(), TrainingStats::new(widest, Density::Dense, false))
        }
        TransformKind::Select { column } => {
            let (_, col) = inputs[0].column(column).ok_or_else(|| IrError::UnknownColumn {
                node: node.id,
                column: column.clone(),
            })?;
            let (size, density) = match &col.dtype {
                DataType::Vector { density, len } => (*len, *density),
                _ => (1, Density::Dense),
            };
            (
                Schema::single(column.clone(), col.dtype.clone()),
                TrainingStats::new(size, density, false),
            )
        }
        TransformKind::Tokenize => {
            let dt = single_input(node, inputs, "Text")?;
            if *dt != DataType::Text {
                return Err(IrError::TypeMismatch {
                    node: node.id,
                    kind: node.kind.name(),
                    expected: "Text",
                    found: dt.to_string(),
                });
            }
            match params.as_deref() {
                Some(ParamView::Tokenizer(_)) => {}
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            }
            (
                Schema::single(name, DataType::Tokens),
                TrainingStats::new(DEFAULT_MAX_TOKENS, Density::Sparse, false),
            )
        }
        TransformKind::CharNgram | TransformKind::WordNgram => {
            let dt = single_input(node, inputs, "Token-sequence")?;
            if *dt != DataType::Tokens {
                return Err(IrError::TypeMismatch {
                    node: node.id,
                    kind: node.kind.name(),
                    expected: "Token-sequence",
                    found: dt.to_string(),
                });
            }
            let dict = match params.as_deref() {
                Some(ParamView::Ngram(d)) => d,
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            };
            if dict.is_empty() {
                return Err(IrError::EmptyDictionary { node: node.id });
            }
            (
                Schema::single(name, DataType::vector(Density::Sparse, dict.len())?),
                TrainingStats::new(dict.len(), Density::Sparse, false),
            )
        }
        TransformKind::Concat => {
            let mut total = 0;
            let mut all_dense = true;
            for s in inputs {
                let dt = single_input(node, std::slice::from_ref(s), "Float-vector")?;
                let (d, len) = expect_vector(node, dt)?;
                total += len;
                all_dense &= d == Density::Dense;
            }
            let density = if all_dense { Density::Dense } else { Density::Sparse };
            (
                Schema::single(name, DataType::vector(density, total)?),
                TrainingStats::new(total, density, false),
            )
        }
        TransformKind::NormalizeL2 => {
            let dt = single_input(node, inputs, "Float-vector")?;
            let (d, len) = expect_vector(node, dt)?;
            (Schema::single(name, dt.clone()), TrainingStats::new(len, d, false))
        }
        TransformKind::PcaProject => {
            let dt = single_input(node, inputs, "Float-vector")?;
            let (_, len) = expect_vector(node, dt)?;
            let p = match params.as_deref() {
                Some(ParamView::Pca(p)) => p,
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            };
            expect_dim(node, p.dim, len)?;
            (
                Schema::single(name, DataType::vector(Density::Dense, p.components)?),
                TrainingStats::new(p.components, Density::Dense, false),
            )
        }
        TransformKind::KMeansFeaturize => {
            let dt = single_input(node, inputs, "Float-vector")?;
            let (_, len) = expect_vector(node, dt)?;
            let p = match params.as_deref() {
                Some(ParamView::KMeans(p)) => p,
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            };
            expect_dim(node, p.dim, len)?;
            (
                Schema::single(name, DataType::vector(Density::Dense, p.k)?),
                TrainingStats::new(p.k, Density::Dense, false),
            )
        }
        TransformKind::TreeEnsemble => {
            let dt = single_input(node, inputs, "Float-vector")?;
            let (_, len) = expect_vector(node, dt)?;
            let p = match params.as_deref() {
                Some(ParamView::Trees(p)) => p,
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            };
            if p.min_features() > len {
                return Err(IrError::DimensionMismatch {
                    node: node.id,
                    kind: node.kind.name(),
                    expected: p.min_features(),
                    found: len,
                });
            }
            (
                Schema::single(name, DataType::Scalar),
                TrainingStats::new(1, Density::Dense, false),
            )
        }
        TransformKind::LinearBinaryClassifier => {
            let dt = single_input(node, inputs, "Float-vector")?;
            let (_, len) = expect_vector(node, dt)?;
            let p = match params.as_deref() {
                Some(ParamView::Linear(p)) => p,
                Some(other) => return Err(wrong_params(node, other)),
                None => unreachable!(),
            };
            expect_dim(node, p.weights.len(), len)?;
            (
                Schema::single(name, DataType::Scalar),
                TrainingStats::new(1, Density::Dense, false),
            )
        }
    };
    let stats = match node.stats {
        None => natural,
        Some(s) => {
            if s.max_vector_size < natural.max_vector_size {
                return Err(IrError::StatsTooSmall {
                    node: node.id,
                    declared: s.max_vector_size,
                    required: natural.max_vector_size,
                });
            }
            s
        }
    };
    Ok((schema, stats))
}

/// Fluent construction of pipelines over a shared id space and object store.
///
/// Streams derived from the same builder can be combined with [`Stream::concat`];
/// ids never collide because the builder hands them out.
pub struct PipelineBuilder<'s> {
    store: &'s ObjectStore,
    next: Cell<u32>,
}

impl<'s> PipelineBuilder<'s> {
    pub fn new(store: &'s ObjectStore) -> Self {
        PipelineBuilder {
            store,
            next: Cell::new(0),
        }
    }

    pub fn store(&self) -> &'s ObjectStore {
        self.store
    }

    fn fresh(&self) -> NodeId {
        let id = self.next.get();
        self.next.set(id + 1);
        NodeId(id)
    }

    pub fn csv(&self, schema: Schema, separator: char) -> Result<Stream<'_, 's>, crate::Error> {
        let id = self.fresh();
        let graph =
            TransformGraph::new().append_as(id, TransformKind::CsvSource { schema, separator }, None, None, &[])?;
        Ok(Stream {
            builder: self,
            graph,
            node: id,
        })
    }
}

#[derive(Clone)]
pub struct Stream<'b, 's> {
    builder: &'b PipelineBuilder<'s>,
    graph: TransformGraph,
    node: NodeId,
}

impl<'b, 's> Stream<'b, 's> {
    pub fn graph(&self) -> &TransformGraph {
        &self.graph
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    fn push(
        &self,
        kind: TransformKind,
        params: Option<&Params>,
        inputs: &[NodeId],
        graph: &TransformGraph,
    ) -> Result<Self, crate::Error> {
        let sum = match params {
            Some(p) => Some(self.builder.store.put(p)?),
            None => None,
        };
        let id = self.builder.fresh();
        let graph = graph.append_as(id, kind, sum, None, inputs)?;
        Ok(Stream {
            builder: self.builder,
            graph,
            node: id,
        })
    }

    fn unary(&self, kind: TransformKind, params: Option<&Params>) -> Result<Self, crate::Error> {
        self.push(kind, params, &[self.node], &self.graph)
    }

    pub fn select(&self, column: &str) -> Result<Self, crate::Error> {
        self.unary(
            TransformKind::Select {
                column: column.to_string(),
            },
            None,
        )
    }

    pub fn tokenize(&self, p: &TokenizerParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::Tokenize, Some(&Params::Tokenizer(p.clone())))
    }

    pub fn char_ngram(&self, p: &NgramParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::CharNgram, Some(&Params::Ngram(p.clone())))
    }

    pub fn word_ngram(&self, p: &NgramParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::WordNgram, Some(&Params::Ngram(p.clone())))
    }

    pub fn normalize_l2(&self) -> Result<Self, crate::Error> {
        self.unary(TransformKind::NormalizeL2, None)
    }

    pub fn pca(&self, p: &PcaParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::PcaProject, Some(&Params::Pca(p.clone())))
    }

    pub fn kmeans(&self, p: &KMeansParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::KMeansFeaturize, Some(&Params::KMeans(p.clone())))
    }

    pub fn tree_ensemble(&self, p: &TreeEnsembleParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::TreeEnsemble, Some(&Params::Trees(p.clone())))
    }

    pub fn linear_classifier(&self, p: &LinearParams) -> Result<Self, crate::Error> {
        self.unary(TransformKind::LinearBinaryClassifier, Some(&Params::Linear(p.clone())))
    }

    /// Concatenates this stream with `others`, in order.
    pub fn concat(&self, others: &[&Stream<'b, 's>]) -> Result<Self, crate::Error> {
        let mut graph = self.graph.clone();
        let mut inputs = vec![self.node];
        for o in others {
            graph = graph.merge(&o.graph, o.node);
            inputs.push(o.node);
        }
        self.push(TransformKind::Concat, None, &inputs, &graph)
    }

    /// Attaches training statistics to the stream's head node.
    pub fn with_stats(mut self, stats: TrainingStats) -> Self {
        self.graph = self.graph.with_stats(self.node, stats).expect("stream head exists");
        self
    }

    pub fn plan(&self) -> Result<ModelPlan, crate::Error> {
        Ok(optimizer::plan(&self.graph, self.builder.store)?)
    }
}
