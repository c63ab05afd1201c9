//! Stateless kernels. Each writes into a caller-provided vector and takes any extra
//! working memory from [`Scratch`], so none of them allocate once buffers are warm.

use crate::params::{Aggregate, KMeansParams, NgramDict, PcaParams, TokenizerParams, TreeEnsembleParams, TreeNode};

use super::vector::{DataVector, Input};

/// Per-worker working memory reused across calls.
#[derive(Default, Debug)]
pub struct Scratch {
    counts: Vec<f64>,
    touched: Vec<u32>,
    dense: Vec<f64>,
}

impl Scratch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sizes the n-gram counter for a dictionary. Only grows.
    pub fn reserve_counts(&mut self, dict_len: usize) {
        if self.counts.len() < dict_len {
            self.counts.resize(dict_len, 0.0);
        }
        if self.touched.capacity() < dict_len {
            self.touched.reserve(dict_len - self.touched.len());
        }
    }

    pub fn reserve_dense(&mut self, len: usize) {
        if self.dense.capacity() < len {
            self.dense.reserve(len - self.dense.len());
        }
    }

    pub fn heap_bytes(&self) -> usize {
        self.counts.capacity() * 8 + self.touched.capacity() * 4 + self.dense.capacity() * 8
    }

    #[inline]
    fn bump(&mut self, i: u32) {
        let c = &mut self.counts[i as usize];
        if *c == 0.0 {
            self.touched.push(i);
        }
        *c += 1.0;
    }

    /// Emits accumulated counts as a sorted sparse vector and clears the counter.
    fn drain_counts(&mut self, len: usize, out: &mut DataVector) {
        self.touched.sort_unstable();
        out.reset_sparse(len);
        for &i in &self.touched {
            let c = &mut self.counts[i as usize];
            out.push_sparse(i, *c);
            *c = 0.0;
        }
        self.touched.clear();
    }
}

#[inline]
fn is_token_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Splits on whitespace and punctuation. Spans index into `text`.
pub fn tokenize(p: &TokenizerParams, text: &str, out: &mut DataVector) {
    out.reset_tokens();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_token_char(c) {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push_span(s, i);
        }
        if p.keep_punctuation && !c.is_whitespace() {
            out.push_span(i, i + c.len_utf8());
        }
    }
    if let Some(s) = start {
        out.push_span(s, text.len());
    }
}

/// Character n-grams inside each token; tokens shorter than `n` contribute nothing.
pub fn char_ngrams<'a>(
    dict: &NgramDict,
    tokens: impl Iterator<Item = &'a str>,
    out: &mut DataVector,
    scratch: &mut Scratch,
) {
    scratch.reserve_counts(dict.len());
    let n = dict.n;
    for tok in tokens {
        let mut ends = tok
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(tok.len()))
            .skip(n);
        for (start, _) in tok.char_indices() {
            let Some(end) = ends.next() else { break };
            if let Some(i) = dict.lookup(&tok[start..end]) {
                scratch.bump(i);
            }
        }
    }
    scratch.drain_counts(dict.len(), out);
}

/// Word n-grams: `n` consecutive tokens joined by single spaces.
pub fn word_ngrams(dict: &NgramDict, spans: &[u32], text: &str, out: &mut DataVector, scratch: &mut Scratch) {
    scratch.reserve_counts(dict.len());
    let n = dict.n;
    let count = spans.len() / 2;
    if count >= n {
        for k in 0..=count - n {
            let window = spans[2 * k..2 * (k + n)]
                .chunks_exact(2)
                .map(|s| &text[s[0] as usize..s[1] as usize]);
            if let Some(i) = dict.lookup_joined(window) {
                scratch.bump(i);
            }
        }
    }
    scratch.drain_counts(dict.len(), out);
}

pub fn concat_dense(inputs: &[Input<'_>], out: &mut DataVector) {
    let total = inputs.iter().filter_map(|x| x.vector_len()).sum();
    let dst = out.reset_dense(total);
    let mut off = 0;
    for x in inputs {
        if let Input::Dense(v) = x {
            dst[off..off + v.len()].copy_from_slice(v);
        }
        off += x.vector_len().unwrap_or(0);
    }
}

pub fn concat_sparse(inputs: &[Input<'_>], out: &mut DataVector) {
    let total = inputs.iter().filter_map(|x| x.vector_len()).sum();
    out.reset_sparse(total);
    let mut off = 0u32;
    for x in inputs {
        match x {
            Input::Dense(v) => {
                for (i, &val) in v.iter().enumerate() {
                    if val != 0.0 {
                        out.push_sparse(off + i as u32, val);
                    }
                }
            }
            Input::Sparse { indices, values, .. } => {
                for (i, val) in indices.iter().zip(values.iter()) {
                    out.push_sparse(off + i, *val);
                }
            }
            _ => {}
        }
        off += x.vector_len().unwrap_or(0) as u32;
    }
}

/// `x / ‖x‖₂`; the zero vector maps to itself.
pub fn normalize_l2(x: Input<'_>, out: &mut DataVector) {
    match x {
        Input::Dense(v) => {
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dst = out.reset_dense(v.len());
            if norm > 0.0 {
                for (d, a) in dst.iter_mut().zip(v) {
                    *d = a / norm;
                }
            }
        }
        Input::Sparse { len, indices, values } => {
            let norm = values.iter().map(|a| a * a).sum::<f64>().sqrt();
            out.reset_sparse(len);
            for (i, a) in indices.iter().zip(values) {
                out.push_sparse(*i, if norm > 0.0 { a / norm } else { 0.0 });
            }
        }
        _ => {}
    }
}

fn densify_into(x: Input<'_>, buf: &mut Vec<f64>) {
    buf.clear();
    match x {
        Input::Sparse { len, indices, values } => {
            buf.resize(len, 0.0);
            for (i, v) in indices.iter().zip(values) {
                buf[*i as usize] = *v;
            }
        }
        Input::Dense(v) => buf.extend_from_slice(v),
        _ => {}
    }
}

/// `y = Pᵀ(x − μ)` over a dense input.
pub fn pca_dense(p: &PcaParams, x: &[f64], out: &mut DataVector) {
    let y = out.reset_dense(p.components);
    for (i, (xi, mi)) in x.iter().zip(&p.mean).enumerate() {
        let d = xi - mi;
        let row = &p.projection[i * p.components..(i + 1) * p.components];
        for (yj, pij) in y.iter_mut().zip(row) {
            *yj += d * pij;
        }
    }
}

/// Same contract as [`pca_dense`], row updates unrolled in blocks of four lanes.
pub fn pca_dense_simd(p: &PcaParams, x: &[f64], out: &mut DataVector) {
    let c = p.components;
    let y = out.reset_dense(c);
    for (i, (xi, mi)) in x.iter().zip(&p.mean).enumerate() {
        let d = xi - mi;
        let row = &p.projection[i * c..(i + 1) * c];
        let mut yc = y.chunks_exact_mut(4);
        let mut rc = row.chunks_exact(4);
        for (ys, rs) in (&mut yc).zip(&mut rc) {
            ys[0] += d * rs[0];
            ys[1] += d * rs[1];
            ys[2] += d * rs[2];
            ys[3] += d * rs[3];
        }
        for (yj, pij) in yc.into_remainder().iter_mut().zip(rc.remainder()) {
            *yj += d * pij;
        }
    }
}

pub fn pca_sparse(p: &PcaParams, x: Input<'_>, out: &mut DataVector, scratch: &mut Scratch) {
    let mut dense = std::mem::take(&mut scratch.dense);
    densify_into(x, &mut dense);
    pca_dense(p, &dense, out);
    scratch.dense = dense;
}

/// Squared Euclidean distance to each centroid.
pub fn kmeans_dense(p: &KMeansParams, x: &[f64], out: &mut DataVector) {
    let y = out.reset_dense(p.k);
    for (j, yj) in y.iter_mut().enumerate() {
        let c = &p.centroids[j * p.dim..(j + 1) * p.dim];
        *yj = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    }
}

pub fn kmeans_dense_simd(p: &KMeansParams, x: &[f64], out: &mut DataVector) {
    let y = out.reset_dense(p.k);
    for (j, yj) in y.iter_mut().enumerate() {
        let c = &p.centroids[j * p.dim..(j + 1) * p.dim];
        let mut acc = [0.0f64; 4];
        let mut xc = x.chunks_exact(4);
        let mut cc = c.chunks_exact(4);
        for (xs, cs) in (&mut xc).zip(&mut cc) {
            for l in 0..4 {
                let d = xs[l] - cs[l];
                acc[l] += d * d;
            }
        }
        let mut tail = 0.0;
        for (a, b) in xc.remainder().iter().zip(cc.remainder()) {
            tail += (a - b) * (a - b);
        }
        *yj = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
}

pub fn kmeans_sparse(p: &KMeansParams, x: Input<'_>, out: &mut DataVector, scratch: &mut Scratch) {
    let mut dense = std::mem::take(&mut scratch.dense);
    densify_into(x, &mut dense);
    kmeans_dense(p, &dense, out);
    scratch.dense = dense;
}

/// Sum or average of per-tree leaf values. `x[f] <= threshold` branches left.
pub fn trees(p: &TreeEnsembleParams, x: Input<'_>) -> f64 {
    let mut total = 0.0;
    for t in &p.trees {
        let mut i = 0usize;
        loop {
            match t.nodes[i] {
                TreeNode::Leaf { value } => {
                    total += value;
                    break;
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x.get(feature as usize) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }
    match p.aggregate {
        Aggregate::Sum => total,
        Aggregate::Average => total / p.trees.len() as f64,
    }
}

#[inline]
pub fn dot_dense(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Four independent accumulators so the compiler can keep them in vector lanes.
#[inline]
pub fn dot_dense_simd(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut wc = w.chunks_exact(4);
    let mut xc = x.chunks_exact(4);
    for (ws, xs) in (&mut wc).zip(&mut xc) {
        acc[0] += ws[0] * xs[0];
        acc[1] += ws[1] * xs[1];
        acc[2] += ws[2] * xs[2];
        acc[3] += ws[3] * xs[3];
    }
    let tail: f64 = wc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot_sparse(w: &[f64], indices: &[u32], values: &[f64]) -> f64 {
    indices.iter().zip(values).map(|(i, v)| w[*i as usize] * v).sum()
}

#[inline]
pub fn sigmoid(score: f64) -> f64 {
    1.0 / (1.0 + (-score).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NgramParams, ParamView, Params, Tree};

    fn dict(n: usize, terms: &[&str]) -> NgramDict {
        let p = Params::Ngram(NgramParams::new(n, terms.iter().map(|s| s.to_string()).collect()));
        match ParamView::decode(&p.encode()).unwrap() {
            ParamView::Ngram(d) => d,
            _ => unreachable!(),
        }
    }

    fn toks(text: &str, keep: bool) -> Vec<String> {
        let mut v = DataVector::default();
        tokenize(&TokenizerParams { keep_punctuation: keep }, text, &mut v);
        v.view(Some(text)).tokens().unwrap().map(str::to_string).collect()
    }

    #[test]
    fn tokenize_basic() {
        assert_eq!(toks("I love pickles", false), ["I", "love", "pickles"]);
        assert!(toks("", false).is_empty());
        assert_eq!(toks("don't stop!", false), ["don", "t", "stop"]);
        assert_eq!(toks("hi, you", true), ["hi", ",", "you"]);
        assert_eq!(toks("naïve café", false), ["naïve", "café"]);
    }

    #[test]
    fn char_ngram_single_hit() {
        let d = dict(2, &["ab"]);
        let mut out = DataVector::default();
        let mut s = Scratch::new();
        char_ngrams(&d, ["ab"].into_iter(), &mut out, &mut s);
        assert_eq!(out, DataVector::from_sparse(1, &[0], &[1.0]));
        char_ngrams(&d, ["xy"].into_iter(), &mut out, &mut s);
        assert_eq!(out.nnz(), 0);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn word_ngram_counts_repeats() {
        let text = "a b a b";
        let mut t = DataVector::default();
        tokenize(&TokenizerParams::default(), text, &mut t);
        let d = dict(2, &["b a", "a b"]);
        let mut out = DataVector::default();
        word_ngrams(&d, t.indices(), text, &mut out, &mut Scratch::new());
        assert_eq!(out, DataVector::from_sparse(2, &[0, 1], &[1.0, 2.0]));
    }

    #[test]
    fn l2_cases() {
        let mut out = DataVector::default();
        normalize_l2(Input::Dense(&[0.0, 1.0, 0.0]), &mut out);
        assert_eq!(out.values(), &[0.0, 1.0, 0.0]);
        normalize_l2(Input::Dense(&[0.0, 0.0]), &mut out);
        assert_eq!(out.values(), &[0.0, 0.0]);
        normalize_l2(Input::Dense(&[3.0, 4.0]), &mut out);
        assert_eq!(out.values(), &[0.6, 0.8]);
    }

    #[test]
    fn pca_identity() {
        let p = PcaParams {
            dim: 3,
            components: 3,
            mean: vec![0.0; 3],
            projection: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let mut out = DataVector::default();
        pca_dense(&p, &[1.0, -2.0, 3.5], &mut out);
        assert_eq!(out.values(), &[1.0, -2.0, 3.5]);
        pca_dense_simd(&p, &[1.0, -2.0, 3.5], &mut out);
        assert_eq!(out.values(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn stump() {
        let p = TreeEnsembleParams {
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
        };
        assert_eq!(trees(&p, Input::Dense(&[0.3])), 1.0);
        assert_eq!(trees(&p, Input::Dense(&[0.7])), 2.0);
    }

    #[test]
    fn linear_identities() {
        assert_eq!(sigmoid(dot_dense(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0])), 0.5);
        let w = [0.0, 2.5, 0.0, -1.0];
        assert_eq!(dot_sparse(&w, &[1], &[2.0]), 5.0);
        let a = [1.0, 1.0, 1.0];
        let b = [1.0, 1.0];
        let w = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(dot_dense(&w[..3], &a), 6.0);
        assert_eq!(dot_dense(&w[3..], &b), 9.0);
    }
}
