//! Shared test support: a node-at-a-time reference interpreter that works on plain
//! `Vec<f64>` / `Vec<String>` values, and a generator of random pipelines.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stageserve::ir::{NodeId, Stream};
use stageserve::optimizer::ModelPlan;
use stageserve::prelude::*;

/// Characters used in generated text; includes a multi-byte letter.
pub const ALPHABET: [char; 4] = ['a', 'b', 'c', 'é'];
pub const PUNCT: [&str; 3] = [",", "!", "?"];

#[derive(Clone, Debug, PartialEq)]
pub enum RefValue {
    Text(String),
    Tokens(Vec<String>),
    Vector(Vec<f64>),
    Scalar(f64),
}

impl RefValue {
    fn vector(&self) -> &[f64] {
        match self {
            RefValue::Vector(v) => v,
            other => panic!("expected vector, got {other:?}"),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Splits into maximal alphanumeric runs; other non-space characters become
/// single-character tokens when `keep_punctuation` is set.
pub fn ref_tokenize(text: &str, keep_punctuation: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if keep_punctuation && !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn counts(terms: &[String], grams: impl Iterator<Item = String>) -> Vec<f64> {
    let index: HashMap<&str, usize> = terms.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut v = vec![0.0; terms.len()];
    for g in grams {
        if let Some(i) = index.get(g.as_str()) {
            v[*i] += 1.0;
        }
    }
    v
}

pub fn ref_char_ngrams(p: &NgramParams, tokens: &[String]) -> Vec<f64> {
    let grams = tokens.iter().flat_map(|t| {
        let chars: Vec<char> = t.chars().collect();
        chars
            .windows(p.n)
            .map(|w| w.iter().collect::<String>())
            .collect::<Vec<_>>()
    });
    counts(&p.terms, grams)
}

pub fn ref_word_ngrams(p: &NgramParams, tokens: &[String]) -> Vec<f64> {
    let grams = tokens.windows(p.n).map(|w| w.join(" ")).collect::<Vec<_>>();
    counts(&p.terms, grams.into_iter())
}

pub fn ref_tree(t: &Tree, x: &[f64]) -> f64 {
    let mut i = 0;
    loop {
        match t.nodes[i] {
            TreeNode::Leaf { value } => return value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => i = if x[feature as usize] <= threshold { left } else { right } as usize,
        }
    }
}

/// Output of the reference interpreter for one record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefPrediction {
    pub score: f64,
    pub probability: Option<f64>,
}

/// A generated pipeline with the parameters it references, kept independently of
/// the object store.
pub struct Generated {
    pub graph: TransformGraph,
    pub params: HashMap<Checksum, Params>,
    pub schema: Schema,
    pub vocab: Vec<String>,
    pub seed: u64,
}

impl Generated {
    /// Evaluates the graph one node at a time, straight from the parameter structs.
    pub fn interpret(&self, record: &Record) -> RefPrediction {
        let vals = self.eval(record);
        let sink = self.graph.sink().expect("sink");
        let score = match &vals[&sink] {
            RefValue::Scalar(s) => *s,
            other => panic!("sink produced {other:?}"),
        };
        let linear = matches!(
            self.graph.node(sink).map(|n| &n.kind),
            Some(TransformKind::LinearBinaryClassifier)
        );
        RefPrediction {
            score,
            probability: linear.then(|| sigmoid(score)),
        }
    }

    /// Values of every node for `record`.
    pub fn eval(&self, record: &Record) -> BTreeMap<NodeId, RefValue> {
        let mut vals: BTreeMap<NodeId, RefValue> = BTreeMap::new();
        let mut order: Vec<&stageserve::ir::TransformNode> = self.graph.nodes().collect();
        order.sort_by_key(|n| n.id);
        let mut source_fields: HashMap<String, RefValue> = HashMap::new();
        for n in order {
            let p = n.params.map(|c| &self.params[&c]);
            let arg = |i: usize| &vals[&n.inputs[i]];
            let v = match (&n.kind, p) {
                (TransformKind::CsvSource { schema, .. }, _) => {
                    for c in schema.columns() {
                        let v = match record.get(&c.name).expect("record has column") {
                            Value::Text(t) => RefValue::Text(t.clone()),
                            Value::Scalar(x) => RefValue::Scalar(*x),
                            Value::Vector(xs) => RefValue::Vector(xs.clone()),
                        };
                        source_fields.insert(c.name.clone(), v);
                    }
                    RefValue::Scalar(f64::NAN)
                }
                (TransformKind::Select { column }, _) => source_fields[column].clone(),
                (TransformKind::Tokenize, Some(Params::Tokenizer(t))) => match arg(0) {
                    RefValue::Text(s) => RefValue::Tokens(ref_tokenize(s, t.keep_punctuation)),
                    other => panic!("tokenize on {other:?}"),
                },
                (TransformKind::CharNgram, Some(Params::Ngram(d))) => match arg(0) {
                    RefValue::Tokens(t) => RefValue::Vector(ref_char_ngrams(d, t)),
                    other => panic!("char ngram on {other:?}"),
                },
                (TransformKind::WordNgram, Some(Params::Ngram(d))) => match arg(0) {
                    RefValue::Tokens(t) => RefValue::Vector(ref_word_ngrams(d, t)),
                    other => panic!("word ngram on {other:?}"),
                },
                (TransformKind::Concat, _) => {
                    RefValue::Vector((0..n.inputs.len()).flat_map(|i| arg(i).vector().to_vec()).collect())
                }
                (TransformKind::NormalizeL2, _) => {
                    let x = arg(0).vector();
                    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                    RefValue::Vector(x.iter().map(|a| if norm > 0.0 { a / norm } else { 0.0 }).collect())
                }
                (TransformKind::PcaProject, Some(Params::Pca(p))) => {
                    let x = arg(0).vector();
                    let y = (0..p.components)
                        .map(|j| {
                            (0..p.dim)
                                .map(|i| (x[i] - p.mean[i]) * p.projection[i * p.components + j])
                                .sum()
                        })
                        .collect();
                    RefValue::Vector(y)
                }
                (TransformKind::KMeansFeaturize, Some(Params::KMeans(p))) => {
                    let x = arg(0).vector();
                    let y = (0..p.k)
                        .map(|j| (0..p.dim).map(|i| (x[i] - p.centroids[j * p.dim + i]).powi(2)).sum())
                        .collect();
                    RefValue::Vector(y)
                }
                (TransformKind::TreeEnsemble, Some(Params::Trees(p))) => {
                    let x = arg(0).vector();
                    let total: f64 = p.trees.iter().map(|t| ref_tree(t, x)).sum();
                    RefValue::Scalar(match p.aggregate {
                        Aggregate::Sum => total,
                        Aggregate::Average => total / p.trees.len() as f64,
                    })
                }
                (TransformKind::LinearBinaryClassifier, Some(Params::Linear(p))) => {
                    let x = arg(0).vector();
                    RefValue::Scalar(p.bias + p.weights.iter().zip(x).map(|(w, a)| w * a).sum::<f64>())
                }
                (k, p) => panic!("bad node {k:?} with {p:?}"),
            };
            vals.insert(n.id, v);
        }
        vals
    }

    /// A record matching the source schema; text draws from the generator's vocabulary.
    pub fn record(&self, rng: &mut impl Rng) -> Record {
        let mut r = Record::new();
        for c in self.schema.columns() {
            match &c.dtype {
                DataType::Text => {
                    let len = rng.random_range(0..16);
                    let mut s = String::new();
                    for i in 0..len {
                        if i > 0 {
                            s.push_str([" ", " ", "  ", "\t"].choose(rng).unwrap());
                        }
                        s.push_str(self.vocab.choose(rng).unwrap());
                    }
                    r.set(&c.name, s);
                }
                DataType::Vector { density, len } => {
                    let zero = if *density == Density::Sparse { 0.6 } else { 0.1 };
                    let v: Vec<f64> = (0..*len)
                        .map(|_| {
                            if rng.random_bool(zero) {
                                0.0
                            } else {
                                rng.random_range(-2.0..2.0)
                            }
                        })
                        .collect();
                    r.set(&c.name, v);
                }
                DataType::Scalar => r.set(&c.name, rng.random_range(-1.0..1.0)),
                DataType::Tokens => unreachable!("not a source type"),
            }
        }
        r
    }
}

/// `|a - b| <= rel * max(|a|, |b|)`, with a 1e-12 absolute floor for results that
/// cancel to (near) zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() <= 1e-12
}

pub fn prediction_matches(got: &Prediction, want: &RefPrediction, rel: f64) -> bool {
    close(got.score, want.score, rel)
        && match (got.probability, want.probability) {
            (Some(a), Some(b)) => close(a, b, rel),
            (None, None) => true,
            _ => false,
        }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    store: &'a ObjectStore,
    params: HashMap<Checksum, Params>,
    vocab: Vec<String>,
}

impl Gen<'_> {
    fn keep<T: Clone>(&mut self, p: T, wrap: fn(T) -> Params) -> T {
        let wrapped = wrap(p.clone());
        let sum = self.store.put(&wrapped).expect("put params");
        self.params.insert(sum, wrapped);
        p
    }

    fn unique_terms(&mut self, want: usize, mut make: impl FnMut(&mut ChaCha8Rng) -> String) -> Vec<String> {
        let mut terms: Vec<String> = Vec::new();
        for _ in 0..want * 4 {
            let t = make(&mut self.rng);
            if !terms.contains(&t) {
                terms.push(t);
            }
            if terms.len() == want {
                break;
            }
        }
        terms
    }

    fn ngram(&mut self, char_level: bool) -> NgramParams {
        let want = self.rng.random_range(3..30);
        if char_level {
            let n = self.rng.random_range(1..=3);
            let terms = self.unique_terms(want, |r| (0..n).map(|_| *ALPHABET.choose(r).unwrap()).collect());
            NgramParams::new(n, terms)
        } else {
            let n = self.rng.random_range(1..=2);
            let vocab = self.vocab.clone();
            let terms = self.unique_terms(want, |r| {
                (0..n)
                    .map(|_| vocab.choose(r).unwrap().as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            });
            NgramParams::new(n, terms)
        }
    }

    fn pca(&mut self, dim: usize) -> PcaParams {
        let components = self.rng.random_range(1..=dim.min(6));
        PcaParams {
            dim,
            components,
            mean: (0..dim).map(|_| self.rng.random_range(-0.5..0.5)).collect(),
            projection: (0..dim * components)
                .map(|_| self.rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    fn kmeans(&mut self, dim: usize) -> KMeansParams {
        let k = self.rng.random_range(1..=5);
        KMeansParams {
            dim,
            k,
            centroids: (0..dim * k).map(|_| self.rng.random_range(-1.5..1.5)).collect(),
        }
    }

    fn tree(&mut self, features: &[Vec<f64>], depth: usize, nodes: &mut Vec<TreeNode>) -> u32 {
        let at = nodes.len();
        if depth == 0 || self.rng.random_bool(0.1) {
            nodes.push(TreeNode::Leaf {
                value: self.rng.random_range(-1.0..1.0),
            });
            return at as u32;
        }
        nodes.push(TreeNode::Leaf { value: 0.0 });
        let feature = self.rng.random_range(0..features.len());
        // Midpoint of two observed values: both branches stay reachable and discrete
        // features never tie with the threshold.
        let a = *features[feature].choose(&mut self.rng).unwrap();
        let b = *features[feature].choose(&mut self.rng).unwrap();
        let threshold = (a + b) / 2.0;
        let feature = feature as u32;
        let left = self.tree(features, depth - 1, nodes);
        let right = self.tree(features, depth - 1, nodes);
        nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at as u32
    }

    /// `features[f]` holds sample values of input feature `f`.
    fn trees(&mut self, features: &[Vec<f64>]) -> TreeEnsembleParams {
        let count = self.rng.random_range(2..=6);
        let trees = (0..count)
            .map(|_| {
                let mut nodes = Vec::new();
                let depth = self.rng.random_range(1..=4);
                self.tree(features, depth, &mut nodes);
                Tree { nodes }
            })
            .collect();
        TreeEnsembleParams {
            trees,
            aggregate: if self.rng.random_bool(0.5) {
                Aggregate::Sum
            } else {
                Aggregate::Average
            },
        }
    }

    fn linear(&mut self, len: usize) -> LinearParams {
        let density = self.rng.random_range(0.2..1.0);
        LinearParams {
            weights: (0..len)
                .map(|_| {
                    if self.rng.random_bool(density) {
                        self.rng.random_range(-2.0..2.0)
                    } else {
                        0.0
                    }
                })
                .collect(),
            bias: self.rng.random_range(-0.5..0.5),
        }
    }

    /// Sometimes attaches declared statistics that are at least as large as needed.
    fn maybe_stats<'b, 's>(&mut self, s: Stream<'b, 's>, len: usize) -> Stream<'b, 's> {
        if !self.rng.random_bool(0.25) {
            return s;
        }
        let density = if self.rng.random_bool(0.5) {
            Density::Dense
        } else {
            Density::Sparse
        };
        let slack = self.rng.random_range(0..4);
        s.with_stats(TrainingStats::new(len + slack, density, self.rng.random_bool(0.5)))
    }
}

/// A random pipeline of at most `max_nodes` nodes over text and/or vector inputs,
/// ending in a linear classifier or a tree ensemble.
pub fn random_pipeline(seed: u64, store: &ObjectStore, max_nodes: usize) -> Generated {
    for attempt in 0.. {
        let g = try_pipeline(seed.wrapping_mul(0x9e37_79b9).wrapping_add(attempt), store);
        if g.graph.len() <= max_nodes {
            return Generated { seed, ..g };
        }
    }
    unreachable!()
}

fn try_pipeline(seed: u64, store: &ObjectStore) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..20)
        .map(|_| {
            let n = rng.random_range(1..=5);
            (0..n).map(|_| *ALPHABET.choose(&mut rng).unwrap()).collect()
        })
        .chain(PUNCT.iter().map(|p| p.to_string()))
        .collect();
    let mut g = Gen {
        rng,
        store,
        params: HashMap::new(),
        vocab: words,
    };
    let mode = g.rng.random_range(0..3);
    let text = mode != 1;
    let vector = mode != 0;
    let mut cols = Vec::new();
    if text {
        cols.push(Column::new("Text", DataType::Text));
    }
    let fdim = g.rng.random_range(2..=12);
    if vector {
        let density = if g.rng.random_bool(0.5) {
            Density::Dense
        } else {
            Density::Sparse
        };
        cols.push(Column::new("Features", DataType::Vector { density, len: fdim }));
    }
    let schema = Schema::new(cols).expect("schema");
    let builder = PipelineBuilder::new(store);
    let src = builder.csv(schema.clone(), ',').expect("source");

    let mut branches: Vec<(Stream, usize)> = Vec::new();
    if text {
        let keep_punctuation = g.rng.random_bool(0.5);
        let tp = g.keep(TokenizerParams { keep_punctuation }, Params::Tokenizer);
        let tokens = src.select("Text").unwrap().tokenize(&tp).unwrap();
        for _ in 0..g.rng.random_range(1..=3) {
            let char_level = g.rng.random_bool(0.5);
            let v = g.ngram(char_level);
            let d = g.keep(v, Params::Ngram);
            let len = d.terms.len();
            let mut s = if char_level {
                tokens.char_ngram(&d).unwrap()
            } else {
                tokens.word_ngram(&d).unwrap()
            };
            s = g.maybe_stats(s, len);
            if g.rng.random_bool(0.3) {
                s = s.normalize_l2().unwrap();
            }
            branches.push((s, len));
        }
    }
    if vector {
        let mut f = src.select("Features").unwrap();
        if g.rng.random_bool(0.3) {
            f = f.normalize_l2().unwrap();
        }
        match g.rng.random_range(0..4) {
            0 => branches.push((f, fdim)),
            1 => {
                let v = g.pca(fdim);
                let p = g.keep(v, Params::Pca);
                let s = g.maybe_stats(f.pca(&p).unwrap(), p.components);
                branches.push((s, p.components));
            }
            2 => {
                let v = g.kmeans(fdim);
                let p = g.keep(v, Params::KMeans);
                let s = g.maybe_stats(f.kmeans(&p).unwrap(), p.k);
                branches.push((s, p.k));
            }
            _ => {
                let v = g.pca(fdim);
                let p = g.keep(v, Params::Pca);
                let pca = f.pca(&p).unwrap();
                let v = g.kmeans(p.components);
                let k = g.keep(v, Params::KMeans);
                let km = pca.kmeans(&k).unwrap();
                branches.push((pca, p.components));
                branches.push((km, k.k));
            }
        }
    }
    branches.shuffle(&mut g.rng);
    let (mut head, mut len) = if branches.len() == 1 {
        branches.pop().unwrap()
    } else {
        let rest: Vec<&Stream> = branches[1..].iter().map(|b| &b.0).collect();
        let total = branches.iter().map(|b| b.1).sum();
        let c = branches[0].0.concat(&rest).unwrap();
        (g.maybe_stats(c, total), total)
    };
    match g.rng.random_range(0..6) {
        0 => head = head.normalize_l2().unwrap(),
        1 => {
            let v = g.pca(len);
            let p = g.keep(v, Params::Pca);
            head = head.pca(&p).unwrap();
            len = p.components;
        }
        _ => {}
    }
    let out = if g.rng.random_bool(0.6) {
        let v = g.linear(len);
        let p = g.keep(v, Params::Linear);
        head.linear_classifier(&p).unwrap()
    } else {
        let probe = Generated {
            graph: head.graph().clone(),
            params: g.params.clone(),
            schema: schema.clone(),
            vocab: g.vocab.clone(),
            seed,
        };
        let mut samples = vec![Vec::new(); len];
        for _ in 0..16 {
            let rec = probe.record(&mut g.rng);
            match &probe.eval(&rec)[&head.node()] {
                RefValue::Vector(x) => x.iter().zip(&mut samples).for_each(|(v, s)| s.push(*v)),
                other => panic!("predictor input {other:?}"),
            }
        }
        let v = g.trees(&samples);
        let p = g.keep(v, Params::Trees);
        head.tree_ensemble(&p).unwrap()
    };
    Generated {
        graph: out.graph().clone(),
        params: g.params,
        schema,
        vocab: g.vocab,
        seed,
    }
}

/// Seeded generator for test records.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent check of a simulated run: every instance runs each stage exactly once,
/// never before all of its dependencies have finished, never on more workers than
/// exist, and returns every vector it took.
pub fn check_sim(
    trace: &stageserve::scheduler::sim::Trace,
    r: &stageserve::scheduler::sim::SimReport,
) -> Result<(), String> {
    let n = trace.instances.len();
    if r.completed != n {
        return Err(format!("{} of {n} instances completed", r.completed));
    }
    let want: usize = trace.instances.iter().map(|i| i.vectors).sum();
    if r.acquired != want || r.released != want {
        return Err(format!(
            "vectors: {want} expected, {} acquired, {} released",
            r.acquired, r.released
        ));
    }
    let mut busy: Vec<(u64, i64)> = Vec::new();
    for (k, (inst, spans)) in trace.instances.iter().zip(&r.timeline).enumerate() {
        let stages = inst.deps.len();
        let mut finish = vec![None; stages];
        for &(s, start, end) in spans {
            if finish[s].is_some() {
                return Err(format!("instance {k}: stage {s} ran twice"));
            }
            if start < inst.arrival {
                return Err(format!("instance {k}: stage {s} ran before arrival"));
            }
            if end != start + inst.durations[s] {
                return Err(format!("instance {k}: stage {s} has the wrong duration"));
            }
            finish[s] = Some(end);
            busy.push((start, 1));
            busy.push((end, -1));
        }
        for s in 0..stages {
            let start = spans
                .iter()
                .find(|x| x.0 == s)
                .map(|x| x.1)
                .ok_or(format!("instance {k}: stage {s} never ran"))?;
            for (d, fin) in finish.iter().enumerate().take(stages) {
                if inst.deps[s] & (1 << d) != 0 && fin.is_none_or(|f| f > start) {
                    return Err(format!(
                        "instance {k}: stage {s} started before dependency {d} finished"
                    ));
                }
            }
        }
    }
    // Ends sort before starts at the same tick, so back-to-back events on one worker do not overlap.
    busy.sort();
    let mut running = 0i64;
    for (_, delta) in busy {
        running += delta;
        if running > trace.workers.max(1) as i64 {
            return Err(format!("{running} stages in flight on {} workers", trace.workers));
        }
    }
    Ok(())
}

/// The two-branch text pipeline: char and word n-grams over one tokenizer, concatenated
/// into a linear classifier.
pub fn sa_pipeline(store: &ObjectStore) -> TransformGraph {
    let b = PipelineBuilder::new(store);
    let schema = Schema::single("Text", DataType::Text);
    let tokens = b
        .csv(schema, ',')
        .unwrap()
        .select("Text")
        .unwrap()
        .tokenize(&TokenizerParams::default())
        .unwrap();
    let chars = NgramParams::new(3, ["abc", "bcd", "cde", "the", "her"].map(String::from).to_vec());
    let words = NgramParams::new(1, ["good", "bad", "movie"].map(String::from).to_vec());
    let c = tokens.char_ngram(&chars).unwrap();
    let w = tokens.word_ngram(&words).unwrap();
    let weights = LinearParams {
        weights: vec![0.5, -0.25, 0.0, 1.0, 0.125, 2.0, -2.0, 0.75],
        bias: 0.1,
    };
    c.concat(&[&w])
        .unwrap()
        .linear_classifier(&weights)
        .unwrap()
        .graph()
        .clone()
}

pub fn render(plan: &ModelPlan) -> String {
    let mut s = plan.dump();
    for b in &plan.bindings {
        s.push_str(&format!("physical {}\n", b.impl_key));
    }
    s
}

pub fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}
