//! Operator parameters and their canonical byte encoding.
//!
//! Every payload starts with `b"SSPB"`, a codec version byte and a type tag, followed
//! by little-endian fields. Encoding is deterministic, and [`Params::decode`] rejects
//! anything that would not re-encode to the same bytes (unsorted sparse weights,
//! explicit zero weights, non-finite floats), so equal parameters always produce equal
//! checksums.

use std::collections::HashMap;

use smallvec::SmallVec;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"SSPB";
pub const CODEC_VERSION: u8 = 1;

const TAG_TOKENIZER: u8 = 1;
const TAG_NGRAM: u8 = 2;
const TAG_LINEAR: u8 = 3;
const TAG_PCA: u8 = 4;
const TAG_KMEANS: u8 = 5;
const TAG_TREES: u8 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("payload truncated")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported codec version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown parameter tag {0}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid payload: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> CodecError {
    CodecError::Invalid(msg.into())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizerParams {
    /// Emit punctuation characters as single-character tokens instead of dropping them.
    pub keep_punctuation: bool,
}

/// N-gram dictionary; a term's feature index is its position in `terms`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramParams {
    pub n: usize,
    pub terms: Vec<String>,
}

impl NgramParams {
    pub fn new(n: usize, terms: Vec<String>) -> Self {
        NgramParams { n, terms }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// `y = projectionᵀ (x - mean)`; `projection` is `dim × components`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaParams {
    pub dim: usize,
    pub components: usize,
    pub mean: Vec<f64>,
    pub projection: Vec<f64>,
}

/// `centroids` is `k × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansParams {
    pub dim: usize,
    pub k: usize,
    pub centroids: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Sum,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TreeNode {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// Node 0 is the root; children always have larger indices than their parent.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsembleParams {
    pub trees: Vec<Tree>,
    pub aggregate: Aggregate,
}

impl TreeEnsembleParams {
    /// Smallest input length that covers every referenced feature.
    pub fn min_features(&self) -> usize {
        self.trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                TreeNode::Split { feature, .. } => Some(*feature as usize + 1),
                TreeNode::Leaf { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    Tokenizer(TokenizerParams),
    Ngram(NgramParams),
    Linear(LinearParams),
    Pca(PcaParams),
    KMeans(KMeansParams),
    Trees(TreeEnsembleParams),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("parameter field exceeds u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        let b = self.take(8)?;
        let v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(invalid("non-finite float"));
        }
        Ok(v)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        if self.buf.len() < n.saturating_mul(8) {
            return Err(CodecError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<&'a str, CodecError> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| invalid("term is not UTF-8"))
    }
    /// Guards `Vec::with_capacity` against absurd declared lengths.
    fn plausible(&self, count: usize, min_item: usize) -> Result<usize, CodecError> {
        if count.saturating_mul(min_item) > self.buf.len() {
            Err(CodecError::Truncated)
        } else {
            Ok(count)
        }
    }
}

impl Params {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Params::Tokenizer(_) => "tokenizer",
            Params::Ngram(_) => "ngram",
            Params::Linear(_) => "linear",
            Params::Pca(_) => "pca",
            Params::KMeans(_) => "kmeans",
            Params::Trees(_) => "trees",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u8(CODEC_VERSION);
        match self {
            Params::Tokenizer(p) => {
                w.u8(TAG_TOKENIZER);
                w.u8(p.keep_punctuation as u8);
            }
            Params::Ngram(p) => {
                w.u8(TAG_NGRAM);
                w.u32(p.n);
                w.u32(p.terms.len());
                for t in &p.terms {
                    w.str(t);
                }
            }
            Params::Linear(p) => {
                // Stored sparsely; trained linear models are mostly zeros.
                w.u8(TAG_LINEAR);
                w.u32(p.weights.len());
                w.f64(p.bias);
                let nz: Vec<(usize, f64)> = p
                    .weights
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(_, v)| v.to_bits() != 0)
                    .collect();
                w.u32(nz.len());
                for (i, v) in nz {
                    w.u32(i);
                    w.f64(v);
                }
            }
            Params::Pca(p) => {
                w.u8(TAG_PCA);
                w.u32(p.dim);
                w.u32(p.components);
                w.f64s(&p.mean);
                w.f64s(&p.projection);
            }
            Params::KMeans(p) => {
                w.u8(TAG_KMEANS);
                w.u32(p.dim);
                w.u32(p.k);
                w.f64s(&p.centroids);
            }
            Params::Trees(p) => {
                w.u8(TAG_TREES);
                w.u8(match p.aggregate {
                    Aggregate::Sum => 0,
                    Aggregate::Average => 1,
                });
                w.u32(p.trees.len());
                for t in &p.trees {
                    w.u32(t.nodes.len());
                    for n in &t.nodes {
                        match *n {
                            TreeNode::Split {
                                feature,
                                threshold,
                                left,
                                right,
                            } => {
                                w.u8(0);
                                w.u32(feature as usize);
                                w.f64(threshold);
                                w.u32(left as usize);
                                w.u32(right as usize);
                            }
                            TreeNode::Leaf { value } => {
                                w.u8(1);
                                w.f64(value);
                            }
                        }
                    }
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Params, CodecError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(CodecError::BadMagic);
        }
        let version = r.u8()?;
        if version != CODEC_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let params = match r.u8()? {
            TAG_TOKENIZER => match r.u8()? {
                0 => Params::Tokenizer(TokenizerParams {
                    keep_punctuation: false,
                }),
                1 => Params::Tokenizer(TokenizerParams { keep_punctuation: true }),
                b => return Err(invalid(format!("tokenizer flag {b}"))),
            },
            TAG_NGRAM => {
                let n = r.u32()?;
                if n == 0 {
                    return Err(invalid("n-gram order must be positive"));
                }
                let count = {
                    let n = r.u32()?;
                    r.plausible(n, 4)?
                };
                let mut terms = Vec::with_capacity(count);
                for _ in 0..count {
                    terms.push(r.str()?.to_owned());
                }
                Params::Ngram(NgramParams { n, terms })
            }
            TAG_LINEAR => {
                let len = r.u32()?;
                let bias = r.f64()?;
                let nnz = {
                    let n = r.u32()?;
                    r.plausible(n, 12)?
                };
                let mut weights = vec![0.0; len];
                let mut prev: Option<usize> = None;
                for _ in 0..nnz {
                    let i = r.u32()?;
                    let v = r.f64()?;
                    if i >= len || prev.is_some_and(|p| p >= i) {
                        return Err(invalid("sparse weight indices must be increasing and in range"));
                    }
                    if v.to_bits() == 0 {
                        return Err(invalid("explicit zero weight"));
                    }
                    weights[i] = v;
                    prev = Some(i);
                }
                Params::Linear(LinearParams { weights, bias })
            }
            TAG_PCA => {
                let dim = r.u32()?;
                let components = r.u32()?;
                if dim == 0 || components == 0 {
                    return Err(invalid("PCA dimensions must be positive"));
                }
                let mean = r.f64s(dim)?;
                let projection = r.f64s(dim.saturating_mul(components))?;
                Params::Pca(PcaParams {
                    dim,
                    components,
                    mean,
                    projection,
                })
            }
            TAG_KMEANS => {
                let dim = r.u32()?;
                let k = r.u32()?;
                if dim == 0 || k == 0 {
                    return Err(invalid("KMeans dimensions must be positive"));
                }
                let centroids = r.f64s(dim.saturating_mul(k))?;
                Params::KMeans(KMeansParams { dim, k, centroids })
            }
            TAG_TREES => {
                let aggregate = match r.u8()? {
                    0 => Aggregate::Sum,
                    1 => Aggregate::Average,
                    b => return Err(invalid(format!("aggregate {b}"))),
                };
                let count = {
                    let n = r.u32()?;
                    r.plausible(n, 4)?
                };
                if count == 0 {
                    return Err(invalid("empty ensemble"));
                }
                let mut trees = Vec::with_capacity(count);
                for _ in 0..count {
                    let len = {
                        let n = r.u32()?;
                        r.plausible(n, 9)?
                    };
                    let mut nodes = Vec::with_capacity(len);
                    for idx in 0..len {
                        let node = match r.u8()? {
                            0 => {
                                let feature = r.u32()? as u32;
                                let threshold = r.f64()?;
                                let left = r.u32()? as u32;
                                let right = r.u32()? as u32;
                                let ok = |c: u32| (c as usize) > idx && (c as usize) < len;
                                if !ok(left) || !ok(right) {
                                    return Err(invalid("tree child index out of order"));
                                }
                                TreeNode::Split {
                                    feature,
                                    threshold,
                                    left,
                                    right,
                                }
                            }
                            1 => TreeNode::Leaf { value: r.f64()? },
                            b => return Err(invalid(format!("tree node tag {b}"))),
                        };
                        nodes.push(node);
                    }
                    if nodes.is_empty() {
                        return Err(invalid("empty tree"));
                    }
                    trees.push(Tree { nodes });
                }
                Params::Trees(TreeEnsembleParams { trees, aggregate })
            }
            t => return Err(CodecError::UnknownTag(t)),
        };
        if !r.buf.is_empty() {
            return Err(CodecError::TrailingBytes(r.buf.len()));
        }
        Ok(params)
    }
}

/// 64-bit FNV-1a. Streaming: feeding `"ab"` then `" c"` equals feeding `"ab c"`.
#[derive(Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    #[inline]
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    #[inline]
    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Fnv64::default();
        h.write(bytes);
        h.finish()
    }
}

/// Decoded n-gram dictionary with an allocation-free lookup path.
#[derive(Debug)]
pub struct NgramDict {
    pub n: usize,
    terms: Vec<Box<str>>,
    by_hash: HashMap<u64, SmallVec<[u32; 1]>>,
}

impl NgramDict {
    fn build(p: NgramParams) -> Result<Self, CodecError> {
        let mut by_hash: HashMap<u64, SmallVec<[u32; 1]>> = HashMap::with_capacity(p.terms.len());
        let terms: Vec<Box<str>> = p.terms.into_iter().map(String::into_boxed_str).collect();
        for (i, t) in terms.iter().enumerate() {
            let slot = by_hash.entry(Fnv64::hash(t.as_bytes())).or_default();
            if slot.iter().any(|&j| terms[j as usize] == *t) {
                return Err(invalid(format!("duplicate dictionary term `{t}`")));
            }
            slot.push(i as u32);
        }
        Ok(NgramDict { n: p.n, terms, by_hash })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term(&self, index: u32) -> &str {
        &self.terms[index as usize]
    }

    #[inline]
    pub fn lookup(&self, term: &str) -> Option<u32> {
        self.by_hash
            .get(&Fnv64::hash(term.as_bytes()))?
            .iter()
            .copied()
            .find(|&i| &*self.terms[i as usize] == term)
    }

    /// Looks up the term formed by joining `parts` with single spaces.
    #[inline]
    pub fn lookup_joined<'a, I>(&self, parts: I) -> Option<u32>
    where
        I: Iterator<Item = &'a str> + Clone,
    {
        let mut h = Fnv64::default();
        for (k, p) in parts.clone().enumerate() {
            if k > 0 {
                h.write(b" ");
            }
            h.write(p.as_bytes());
        }
        self.by_hash
            .get(&h.finish())?
            .iter()
            .copied()
            .find(|&i| joined_eq(&self.terms[i as usize], parts.clone()))
    }
}

fn joined_eq<'a>(term: &str, parts: impl Iterator<Item = &'a str>) -> bool {
    let mut rest = term.as_bytes();
    for (k, p) in parts.enumerate() {
        if k > 0 {
            match rest.split_first() {
                Some((b' ', tail)) => rest = tail,
                _ => return false,
            }
        }
        match rest.strip_prefix(p.as_bytes()) {
            Some(tail) => rest = tail,
            None => return false,
        }
    }
    rest.is_empty()
}

/// Typed, lookup-ready view of a stored parameter blob.
#[derive(Debug)]
pub enum ParamView {
    Tokenizer(TokenizerParams),
    Ngram(NgramDict),
    Linear(LinearParams),
    Pca(PcaParams),
    KMeans(KMeansParams),
    Trees(TreeEnsembleParams),
}

impl ParamView {
    pub fn decode(bytes: &[u8]) -> Result<ParamView, CodecError> {
        Ok(match Params::decode(bytes)? {
            Params::Tokenizer(p) => ParamView::Tokenizer(p),
            Params::Ngram(p) => ParamView::Ngram(NgramDict::build(p)?),
            Params::Linear(p) => ParamView::Linear(p),
            Params::Pca(p) => ParamView::Pca(p),
            Params::KMeans(p) => ParamView::KMeans(p),
            Params::Trees(p) => ParamView::Trees(p),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ParamView::Tokenizer(_) => "tokenizer",
            ParamView::Ngram(_) => "ngram",
            ParamView::Linear(_) => "linear",
            ParamView::Pca(_) => "pca",
            ParamView::KMeans(_) => "kmeans",
            ParamView::Trees(_) => "trees",
        }
    }

    /// Approximate heap footprint of the decoded view.
    pub fn heap_bytes(&self) -> usize {
        match self {
            ParamView::Tokenizer(_) => 0,
            ParamView::Ngram(d) => d.terms.iter().map(|t| t.len() + 16).sum::<usize>() + d.by_hash.len() * 24,
            ParamView::Linear(p) => p.weights.len() * 8,
            ParamView::Pca(p) => (p.mean.len() + p.projection.len()) * 8,
            ParamView::KMeans(p) => p.centroids.len() * 8,
            ParamView::Trees(p) => p.trees.iter().map(|t| t.nodes.len() * 24).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stump() -> TreeEnsembleParams {
        TreeEnsembleParams {
            trees: vec![Tree {
                nodes: vec![
                    TreeNode::Split {
                        feature: 0,
                        threshold: 0.5,
                        left: 1,
                        right: 2,
                    },
                    TreeNode::Leaf { value: 1.0 },
                    TreeNode::Leaf { value: 2.0 },
                ],
            }],
            aggregate: Aggregate::Sum,
        }
    }

    #[test]
    fn linear_weights_are_stored_sparsely() {
        let dense = Params::Linear(LinearParams {
            weights: vec![0.0; 1000],
            bias: 0.5,
        });
        assert!(dense.encode().len() < 32);
        let mut w = vec![0.0; 1000];
        w[17] = -2.0;
        let p = Params::Linear(LinearParams { weights: w, bias: 0.0 });
        assert_eq!(Params::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Params::Trees(stump()).encode();
        assert_eq!(Params::decode(&bytes[..bytes.len() - 1]), Err(CodecError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Params::decode(&bad), Err(CodecError::BadMagic));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(Params::decode(&long), Err(CodecError::TrailingBytes(1)));
    }

    #[test]
    fn tree_children_must_point_forward() {
        let mut t = stump();
        t.trees[0].nodes[0] = TreeNode::Split {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 2,
        };
        assert!(Params::decode(&Params::Trees(t).encode()).is_err());
    }

    #[test]
    fn duplicate_terms_fail_at_view_build() {
        let p = Params::Ngram(NgramParams::new(1, vec!["a".into(), "a".into()]));
        assert!(Params::decode(&p.encode()).is_ok());
        assert!(ParamView::decode(&p.encode()).is_err());
    }

    #[test]
    fn joined_lookup_matches_plain_lookup() {
        let dict = NgramDict::build(NgramParams::new(
            2,
            vec!["love pickles".into(), "i love".into(), "x".into()],
        ))
        .unwrap();
        assert_eq!(dict.lookup_joined(["love", "pickles"].into_iter()), Some(0));
        assert_eq!(dict.lookup_joined(["i", "love"].into_iter()), Some(1));
        assert_eq!(dict.lookup_joined(["lovepickles"].into_iter()), None);
        assert_eq!(dict.lookup("x"), Some(2));
        assert_eq!(dict.lookup("y"), None);
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            weights in proptest::collection::vec(prop_oneof![Just(0.0), -10.0f64..10.0], 1..64),
            bias in -5.0f64..5.0,
            terms in proptest::collection::btree_set("[a-z ]{1,6}", 1..32),
        ) {
            let lin = Params::Linear(LinearParams { weights, bias });
            prop_assert_eq!(Params::decode(&lin.encode()).unwrap(), lin.clone());
            prop_assert_eq!(Params::decode(&lin.encode()).unwrap().encode(), lin.encode());
            let ng = Params::Ngram(NgramParams::new(2, terms.into_iter().collect()));
            prop_assert_eq!(Params::decode(&ng.encode()).unwrap(), ng);
        }
    }
}
