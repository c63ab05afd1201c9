//! Deterministic synthetic fleets of sentiment-analysis (`Sa`) and attendee-count
//! (`Ac`) style pipelines. Featurizer parameters come from a small pool shared by the
//! whole fleet; predictor parameters are unique per pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use super::{save_bundle, BundleError};
use crate::ir::{Column, DataType, Density, PipelineBuilder, Schema, TrainingStats, TransformGraph};
use crate::params::{
    Aggregate, KMeansParams, LinearParams, NgramParams, PcaParams, TokenizerParams, Tree, TreeEnsembleParams, TreeNode,
};
use crate::runtime::{Record, Value};
use crate::store::ObjectStore;

pub const DESK_DICT_SIZE: usize = 10_000;
pub const FULL_DICT_SIZE: usize = 1_000_000;
pub const AC_FEATURES: usize = 40;
pub const AC_COMPONENTS: usize = 10;
pub const AC_CLUSTERS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Sa,
    Ac,
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Sa => "sa",
            Template::Ac => "ac",
        })
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(Template::Sa),
            "ac" => Ok(Template::Ac),
            other => Err(format!("unknown template `{other}` (expected sa or ac)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FleetSpec {
    pub template: Template,
    pub count: usize,
    pub seed: u64,
    /// Distinct featurizer parameter versions per template (n-gram dictionaries for
    /// `Sa`, PCA and k-means models each for `Ac`).
    pub pool: usize,
    pub dict_size: usize,
    /// Trees per ensemble and their depth (`Ac`).
    pub trees: usize,
    pub tree_depth: usize,
    /// Fraction of nonzero linear weights (`Sa`).
    pub weight_density: f64,
}

impl FleetSpec {
    pub fn desk(template: Template, count: usize, seed: u64) -> Self {
        FleetSpec {
            template,
            count,
            seed,
            pool: 4,
            dict_size: DESK_DICT_SIZE,
            trees: 20,
            tree_depth: 5,
            weight_density: 0.05,
        }
    }

    /// Full-size parameters: ~1M-entry dictionaries and large ensembles.
    pub fn full_scale(template: Template, count: usize, seed: u64) -> Self {
        FleetSpec {
            dict_size: FULL_DICT_SIZE,
            trees: 2000,
            tree_depth: 8,
            ..Self::desk(template, count, seed)
        }
    }

    pub fn with_dict_size(mut self, n: usize) -> Self {
        self.dict_size = n;
        self
    }

    pub fn with_pool(mut self, n: usize) -> Self {
        self.pool = n;
        self
    }

    pub fn name(&self, index: usize) -> String {
        format!("{}-{index:04}", self.template)
    }

    /// Distinct n-gram dictionaries referenced by the first `plans` `Sa` pipelines.
    pub fn ngram_versions_used(&self, plans: usize) -> usize {
        if plans == 0 {
            return 0;
        }
        let cp = self.char_pool();
        plans.min(cp) + plans.div_ceil(cp).min(self.word_pool())
    }

    fn char_pool(&self) -> usize {
        self.pool.div_ceil(2).max(1)
    }

    fn word_pool(&self) -> usize {
        (self.pool / 2).max(1)
    }
}

/// Stable sub-seed for (`seed`, `tag`, `index`).
fn sub_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED69);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag, index))
}

const TAG_VOCAB: u64 = 1;
const TAG_CHAR: u64 = 2;
const TAG_WORD: u64 = 3;
const TAG_LINEAR: u64 = 4;
const TAG_PCA: u64 = 5;
const TAG_KMEANS: u64 = 6;
const TAG_TREES: u64 = 7;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "ch", "st", "tr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// Synthetic lowercase words built from consonant-vowel syllables, ordered by
/// frequency rank.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(seed: u64, size: usize) -> Self {
        let mut r = rng(seed, TAG_VOCAB, 0);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(size);
        while words.len() < size {
            let syllables = r.random_range(1..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[r.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[r.random_range(0..VOWELS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Vocabulary { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// A sentence of `len` words drawn with Zipf-distributed ranks.
    pub fn sentence(&self, r: &mut impl Rng, len: usize) -> String {
        let zipf = Zipf::new(self.words.len() as f64, 1.1).expect("valid zipf");
        let mut s = String::new();
        for i in 0..len {
            if i > 0 {
                s.push(' ');
            }
            let rank = zipf.sample(r) as usize;
            s.push_str(&self.words[rank.clamp(1, self.words.len()) - 1]);
        }
        s
    }
}

/// Vocabulary size backing a spec: comfortably larger than any word dictionary.
fn vocab_size(spec: &FleetSpec) -> usize {
    (spec.dict_size + spec.dict_size / 2).max(256)
}

fn letters(mut k: usize, n: usize) -> String {
    let mut s = String::with_capacity(n);
    for _ in 0..n {
        s.push((b'a' + (k % 26) as u8) as char);
        k /= 26;
    }
    s
}

/// Character n-gram dictionary `member`: every n-gram occurring in the
/// vocabulary, padded with other letter sequences, in a member-specific order.
fn char_dictionary(spec: &FleetSpec, vocab: &Vocabulary, member: usize) -> NgramParams {
    let size = spec.dict_size.max(1);
    let n = (3..).find(|n| 26usize.pow(*n as u32) >= 2 * size).expect("some n fits");
    let mut r = rng(spec.seed, TAG_CHAR, member as u64);
    let mut terms = BTreeSet::new();
    'outer: for w in vocab.words() {
        let chars: Vec<char> = w.chars().collect();
        for win in chars.windows(n) {
            if terms.len() >= size * 3 / 4 {
                break 'outer;
            }
            terms.insert(win.iter().collect::<String>());
        }
    }
    let space = 26usize.pow(n as u32);
    while terms.len() < size {
        terms.insert(letters(r.random_range(0..space), n));
    }
    let mut terms: Vec<String> = terms.into_iter().collect();
    terms.shuffle(&mut r);
    NgramParams::new(n, terms)
}

/// Word dictionary `member`: unigrams for even members, bigrams for odd ones.
fn word_dictionary(spec: &FleetSpec, vocab: &Vocabulary, member: usize) -> NgramParams {
    let size = spec.dict_size.max(1);
    let mut r = rng(spec.seed, TAG_WORD, member as u64);
    if member.is_multiple_of(2) {
        let mut terms: Vec<String> = vocab.words().to_vec();
        // Keep the frequent head, sample the tail.
        let head = (size / 2).min(terms.len());
        let mut tail = terms.split_off(head);
        tail.shuffle(&mut r);
        terms.extend(tail.into_iter().take(size - head));
        terms.shuffle(&mut r);
        NgramParams::new(1, terms)
    } else {
        let top = ((size as f64).sqrt() as usize * 2).clamp(2, vocab.len());
        let mut terms = BTreeSet::new();
        while terms.len() < size {
            let (a, b) = if terms.len() < size / 2 {
                (r.random_range(0..top), r.random_range(0..top))
            } else {
                (r.random_range(0..vocab.len()), r.random_range(0..vocab.len()))
            };
            terms.insert(format!("{} {}", vocab.words()[a], vocab.words()[b]));
        }
        let mut terms: Vec<String> = terms.into_iter().collect();
        terms.shuffle(&mut r);
        NgramParams::new(2, terms)
    }
}

fn linear_weights(spec: &FleetSpec, index: usize, len: usize) -> LinearParams {
    let mut r = rng(spec.seed, TAG_LINEAR, index as u64);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let weights = (0..len)
        .map(|_| {
            if r.random_bool(spec.weight_density) {
                let w: f64 = normal.sample(&mut r);
                if w == 0.0 {
                    1e-3
                } else {
                    w
                }
            } else {
                0.0
            }
        })
        .collect();
    LinearParams {
        weights,
        bias: normal.sample(&mut r) * 0.1 + index as f64 * 1e-9,
    }
}

fn pca_model(spec: &FleetSpec, member: usize) -> PcaParams {
    let mut r = rng(spec.seed, TAG_PCA, member as u64);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    PcaParams {
        dim: AC_FEATURES,
        components: AC_COMPONENTS,
        mean: (0..AC_FEATURES).map(|_| normal.sample(&mut r)).collect(),
        projection: (0..AC_FEATURES * AC_COMPONENTS)
            .map(|_| normal.sample(&mut r) / (AC_FEATURES as f64).sqrt())
            .collect(),
    }
}

fn kmeans_model(spec: &FleetSpec, member: usize) -> KMeansParams {
    let mut r = rng(spec.seed, TAG_KMEANS, member as u64);
    let normal = Normal::new(0.0, 1.5).expect("valid normal");
    KMeansParams {
        dim: AC_COMPONENTS,
        k: AC_CLUSTERS,
        centroids: (0..AC_COMPONENTS * AC_CLUSTERS)
            .map(|_| normal.sample(&mut r))
            .collect(),
    }
}

fn grow_tree(r: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, depth: usize, features: usize) -> u32 {
    let id = nodes.len() as u32;
    if depth == 0 || (depth < 3 && r.random_bool(0.2)) {
        nodes.push(TreeNode::Leaf {
            value: r.random_range(-1.0..1.0),
        });
        return id;
    }
    nodes.push(TreeNode::Leaf { value: 0.0 });
    let feature = r.random_range(0..features) as u32;
    // PCA outputs are centered near zero; k-means distances are positive.
    let threshold = if (feature as usize) < AC_COMPONENTS {
        r.random_range(-1.0..1.0)
    } else {
        r.random_range(5.0..40.0)
    };
    let left = grow_tree(r, nodes, depth - 1, features);
    let right = grow_tree(r, nodes, depth - 1, features);
    nodes[id as usize] = TreeNode::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

fn tree_ensemble(spec: &FleetSpec, index: usize) -> TreeEnsembleParams {
    let mut r = rng(spec.seed, TAG_TREES, index as u64);
    let features = AC_COMPONENTS + AC_CLUSTERS;
    let trees = (0..spec.trees.max(1))
        .map(|_| {
            let mut nodes = Vec::new();
            grow_tree(&mut r, &mut nodes, spec.tree_depth.max(1), features);
            Tree { nodes }
        })
        .collect();
    TreeEnsembleParams {
        trees,
        aggregate: Aggregate::Sum,
    }
}

pub fn sa_schema() -> Schema {
    Schema::new(vec![Column::new("Text", DataType::Text)]).expect("valid schema")
}

pub fn ac_schema() -> Schema {
    Schema::new(vec![Column::new(
        "Features",
        DataType::Vector {
            density: Density::Dense,
            len: AC_FEATURES,
        },
    )])
    .expect("valid schema")
}

struct SaPool {
    chars: Vec<NgramParams>,
    words: Vec<NgramParams>,
}

impl SaPool {
    fn new(spec: &FleetSpec) -> Self {
        let vocab = Vocabulary::new(spec.seed, vocab_size(spec));
        SaPool {
            chars: (0..spec.char_pool())
                .map(|m| char_dictionary(spec, &vocab, m))
                .collect(),
            words: (0..spec.word_pool())
                .map(|m| word_dictionary(spec, &vocab, m))
                .collect(),
        }
    }
}

fn build_sa(spec: &FleetSpec, pool: &SaPool, store: &ObjectStore, index: usize) -> crate::Result<TransformGraph> {
    let chars = &pool.chars[index % pool.chars.len()];
    let words = &pool.words[(index / pool.chars.len()) % pool.words.len()];
    let b = PipelineBuilder::new(store);
    let tokens = b
        .csv(sa_schema(), ',')?
        .select("Text")?
        .tokenize(&TokenizerParams::default())?;
    let c = tokens
        .char_ngram(chars)?
        .with_stats(TrainingStats::new(chars.terms.len(), Density::Sparse, false));
    let w = tokens
        .word_ngram(words)?
        .with_stats(TrainingStats::new(words.terms.len(), Density::Sparse, false));
    let linear = linear_weights(spec, index, chars.terms.len() + words.terms.len());
    Ok(c.concat(&[&w])?.linear_classifier(&linear)?.graph().clone())
}

fn build_ac(spec: &FleetSpec, store: &ObjectStore, index: usize) -> crate::Result<TransformGraph> {
    let pool = spec.pool.max(1);
    let pca = pca_model(spec, index % pool);
    let km = kmeans_model(spec, (index / pool) % pool);
    let b = PipelineBuilder::new(store);
    let reduced = b
        .csv(ac_schema(), ',')?
        .select("Features")?
        .pca(&pca)?
        .with_stats(TrainingStats::new(AC_COMPONENTS, Density::Dense, true));
    let clusters = reduced
        .kmeans(&km)?
        .with_stats(TrainingStats::new(AC_CLUSTERS, Density::Dense, true));
    let trees = tree_ensemble(spec, index);
    Ok(reduced.concat(&[&clusters])?.tree_ensemble(&trees)?.graph().clone())
}

/// The `index`-th `Sa` pipeline of `spec`.
pub fn sa_graph(spec: &FleetSpec, store: &ObjectStore, index: usize) -> crate::Result<TransformGraph> {
    build_sa(spec, &SaPool::new(spec), store, index)
}

/// The `index`-th `Ac` pipeline of `spec`.
pub fn ac_graph(spec: &FleetSpec, store: &ObjectStore, index: usize) -> crate::Result<TransformGraph> {
    build_ac(spec, store, index)
}

#[derive(Clone, Debug)]
pub struct FleetMember {
    pub name: String,
    pub graph: TransformGraph,
}

/// Builds the fleet, putting every parameter blob into `store`.
pub fn generate_fleet(spec: &FleetSpec, store: &ObjectStore) -> crate::Result<Vec<FleetMember>> {
    let sa_pool = (spec.template == Template::Sa).then(|| SaPool::new(spec));
    (0..spec.count)
        .map(|i| {
            let graph = match &sa_pool {
                Some(p) => build_sa(spec, p, store, i)?,
                None => build_ac(spec, store, i)?,
            };
            Ok(FleetMember {
                name: spec.name(i),
                graph,
            })
        })
        .collect()
}

/// Generates the fleet and writes one bundle per member under `dir/<name>`, plus
/// `dir/fleet.json` recording the fleet spec. Returns the bundle directories.
pub fn write_fleet(spec: &FleetSpec, dir: &Path) -> Result<Vec<PathBuf>, crate::Error> {
    let store = ObjectStore::new();
    let fleet = generate_fleet(spec, &store)?;
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(fleet.len());
    for m in &fleet {
        let path = dir.join(&m.name);
        save_bundle(&m.graph, &store, &path, &m.name)?;
        out.push(path);
    }
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    std::fs::write(dir.join("fleet.json"), text)?;
    Ok(out)
}

/// Reads `dir/fleet.json` written by [`write_fleet`].
pub fn read_fleet_spec(dir: &Path) -> Result<FleetSpec, BundleError> {
    let path = dir.join("fleet.json");
    let text = std::fs::read_to_string(&path).map_err(|source| BundleError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| BundleError::Manifest {
        path,
        reason: e.to_string(),
    })
}

/// Input records matching the template's schema.
pub fn sample_records(spec: &FleetSpec, seed: u64, n: usize) -> Vec<Record> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    match spec.template {
        Template::Sa => {
            let vocab = Vocabulary::new(spec.seed, vocab_size(spec).min(4096));
            (0..n)
                .map(|_| {
                    let len = r.random_range(8..40);
                    Record::text("Text", vocab.sentence(&mut r, len))
                })
                .collect()
        }
        Template::Ac => {
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..AC_FEATURES).map(|_| normal.sample(&mut r)).collect();
                    Record::new().with("Features", Value::Vector(v))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn kinds(store: &ObjectStore) -> Vec<&'static str> {
        store
            .checksums()
            .iter()
            .map(|c| store.view(c).unwrap().kind_name())
            .collect()
    }

    #[test]
    fn sa_fleet_shares_dictionaries() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Sa, 30, 3).with_dict_size(500);
        generate_fleet(&spec, &store).unwrap();
        let k = kinds(&store);
        assert_eq!(k.iter().filter(|k| **k == "ngram").count(), 4);
        assert_eq!(k.iter().filter(|k| **k == "linear").count(), 30);
        assert_eq!(k.iter().filter(|k| **k == "tokenizer").count(), 1);
    }

    #[test]
    fn ac_fleet_shares_featurizers() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Ac, 20, 3);
        let fleet = generate_fleet(&spec, &store).unwrap();
        let k = kinds(&store);
        assert_eq!(k.iter().filter(|k| **k == "pca").count(), 4);
        assert_eq!(k.iter().filter(|k| **k == "kmeans").count(), 4);
        assert_eq!(k.iter().filter(|k| **k == "trees").count(), 20);
        for m in &fleet {
            crate::optimizer::plan(&m.graph, &store).unwrap();
        }
    }

    #[test]
    fn deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = FleetSpec::desk(Template::Sa, 3, 11).with_dict_size(300);
        write_fleet(&spec, a.path()).unwrap();
        write_fleet(&spec, b.path()).unwrap();
        for name in ["sa-0000", "sa-0001", "sa-0002"] {
            let ma = std::fs::read(a.path().join(name).join("manifest.json")).unwrap();
            let mb = std::fs::read(b.path().join(name).join("manifest.json")).unwrap();
            assert_eq!(ma, mb);
        }
        assert_eq!(read_fleet_spec(a.path()).unwrap(), spec);
    }

    #[test]
    fn vocabulary_is_distinct() {
        let v = Vocabulary::new(1, 2000);
        let set: HashSet<_> = v.words().iter().collect();
        assert_eq!(set.len(), 2000);
    }

    #[test]
    fn records_hit_dictionaries() {
        let store = ObjectStore::new();
        let spec = FleetSpec::desk(Template::Sa, 4, 5).with_dict_size(2000);
        let fleet = generate_fleet(&spec, &store).unwrap();
        let plan = crate::optimizer::plan(&fleet[0].graph, &store).unwrap();
        assert_eq!(plan.stage_count(), 2);
        let recs = sample_records(&spec, 9, 20);
        let rt = crate::runtime::Runtime::new(std::sync::Arc::new(store), Default::default());
        let id = rt.register(plan, Default::default()).unwrap();
        let scores: HashSet<u64> = recs
            .iter()
            .map(|r| rt.predict(id, r).unwrap().score.to_bits())
            .collect();
        assert!(scores.len() > 10, "records barely touch the dictionaries");
    }
}
