use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::params::ParamView;
use crate::store::{Checksum, ObjectStore};

use super::kernels::{self, Scratch};
use super::registry::{self, Kernel, OpKind};
use super::vector::{DataVector, Input};
use super::KernelError;

/// Where an operator reads or writes a value, relative to its stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Loc {
    /// A column of the request record. Selections compile to this directly.
    Record(u16),
    /// A value produced by an upstream stage.
    Input(u16),
    /// Stage-internal value held in worker scratch space.
    Temp(u16),
    /// A value this stage publishes.
    Output(u16),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpDesc {
    pub node: u32,
    pub key: String,
    pub kind: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Checksum>,
    pub inputs: Vec<Loc>,
    pub out: Loc,
    /// Record column whose text backs token spans read or written by this op.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<u16>,
    /// Weight window for partial dot products.
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub len: usize,
    /// Upper bound on the output's logical length, from training statistics.
    pub bound: usize,
}

/// Parameter-free description of a compiled stage. Two plans whose stages have equal
/// descriptors share one [`PhysicalStage`] instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageDescriptor {
    pub ops: Vec<OpDesc>,
    pub inputs: usize,
    /// Element capacity for each output and temp buffer.
    pub outputs: Vec<usize>,
    pub temps: Vec<usize>,
    /// Leading featurizer ops whose results may be served from the materialization cache.
    pub prefix: usize,
    /// Values written by the prefix that the rest of the stage, or downstream stages, read.
    pub prefix_live: Vec<Loc>,
}

impl StageDescriptor {
    pub fn source_adjacent(&self) -> bool {
        self.inputs == 0
    }

    /// Cache key component identifying the prefix independently of the suffix's params.
    pub fn prefix_descriptor(&self) -> Option<StageDescriptor> {
        if !self.source_adjacent() || self.prefix == 0 {
            return None;
        }
        Some(StageDescriptor {
            ops: self.ops[..self.prefix].to_vec(),
            inputs: 0,
            outputs: Vec::new(),
            temps: Vec::new(),
            prefix: self.prefix,
            prefix_live: self.prefix_live.clone(),
        })
    }
}

#[derive(Debug)]
struct BoundOp {
    kernel: Kernel,
    kind: OpKind,
    node: u32,
    params: Option<Arc<ParamView>>,
    inputs: SmallVec<[Loc; 4]>,
    out: Loc,
    text: Option<u16>,
    offset: usize,
    len: usize,
    bound: usize,
}

/// Per-worker buffers for stage-internal values plus kernel scratch.
#[derive(Default, Debug)]
pub struct Workspace {
    pub temps: Vec<DataVector>,
    pub scratch: Scratch,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn heap_bytes(&self) -> usize {
        self.scratch.heap_bytes() + self.temps.iter().map(|t| t.capacity() * 12).sum::<usize>()
    }
}

/// A stage bound to decoded parameters, ready to run. Immutable and shareable.
#[derive(Debug)]
pub struct PhysicalStage {
    impl_key: String,
    desc: StageDescriptor,
    ops: Vec<BoundOp>,
}

fn check_params(op: &OpDesc, view: &ParamView) -> Result<(), KernelError> {
    let ok = matches!(
        (op.kind, view),
        (OpKind::Tokenize, ParamView::Tokenizer(_))
            | (OpKind::CharNgram | OpKind::WordNgram, ParamView::Ngram(_))
            | (OpKind::PcaProject, ParamView::Pca(_))
            | (OpKind::KMeansFeaturize, ParamView::KMeans(_))
            | (OpKind::TreeEnsemble, ParamView::Trees(_))
            | (
                OpKind::LinearBinaryClassifier | OpKind::PartialDot | OpKind::ScoreSum,
                ParamView::Linear(_)
            )
    );
    if ok {
        Ok(())
    } else {
        Err(KernelError::WrongParams {
            node: op.node,
            kernel: op.key.clone(),
            found: view.kind_name(),
        })
    }
}

impl PhysicalStage {
    pub fn instantiate(impl_key: &str, desc: &StageDescriptor, store: &ObjectStore) -> Result<Self, KernelError> {
        let mut ops = Vec::with_capacity(desc.ops.len());
        for op in &desc.ops {
            let entry = registry::by_key(&op.key).ok_or_else(|| KernelError::UnknownKey(op.key.clone()))?;
            let params = match op.params {
                Some(sum) => {
                    let view = store.view(&sum).map_err(|e| KernelError::Params {
                        node: op.node,
                        reason: e.to_string(),
                    })?;
                    check_params(op, &view)?;
                    Some(view)
                }
                None => None,
            };
            ops.push(BoundOp {
                kernel: entry.kernel,
                kind: op.kind,
                node: op.node,
                params,
                inputs: op.inputs.iter().copied().collect(),
                out: op.out,
                text: op.text,
                offset: op.offset,
                len: op.len,
                bound: op.bound,
            });
        }
        Ok(PhysicalStage {
            impl_key: impl_key.to_string(),
            desc: desc.clone(),
            ops,
        })
    }

    pub fn impl_key(&self) -> &str {
        &self.impl_key
    }

    pub fn descriptor(&self) -> &StageDescriptor {
        &self.desc
    }

    pub fn param_views(&self) -> impl Iterator<Item = &Arc<ParamView>> {
        self.ops.iter().filter_map(|o| o.params.as_ref())
    }

    /// Sizes temps and kernel scratch so later executions do not allocate.
    pub fn prewarm(&self, ws: &mut Workspace) {
        if ws.temps.len() < self.desc.temps.len() {
            ws.temps.resize_with(self.desc.temps.len(), DataVector::default);
        }
        for (t, cap) in ws.temps.iter_mut().zip(&self.desc.temps) {
            t.ensure_capacity(*cap);
        }
        for op in &self.ops {
            match op.params.as_deref() {
                Some(ParamView::Ngram(d)) => ws.scratch.reserve_counts(d.len()),
                Some(ParamView::Pca(p)) => ws.scratch.reserve_dense(p.dim),
                Some(ParamView::KMeans(p)) => ws.scratch.reserve_dense(p.dim),
                _ => {}
            }
        }
    }

    /// Runs ops `from..` of the stage. `record` holds the request columns, `inputs` the
    /// upstream values in stage order; `outputs` are overwritten.
    pub fn execute(
        &self,
        record: &[Input<'_>],
        inputs: &[&DataVector],
        outputs: &mut [DataVector],
        ws: &mut Workspace,
        from: usize,
    ) -> Result<(), KernelError> {
        if ws.temps.len() < self.desc.temps.len() {
            ws.temps.resize_with(self.desc.temps.len(), DataVector::default);
        }
        for op in &self.ops[from..] {
            let mut out = match op.out {
                Loc::Temp(i) => std::mem::take(&mut ws.temps[i as usize]),
                Loc::Output(i) => std::mem::take(&mut outputs[i as usize]),
                _ => return Err(KernelError::BadLoc { node: op.node }),
            };
            let text = match op.text.map(|c| record.get(c as usize)) {
                Some(Some(Input::Text(t))) => Some(*t),
                Some(_) => return Err(KernelError::BadLoc { node: op.node }),
                None => None,
            };
            let result = {
                let temps = &ws.temps;
                let outs: &[DataVector] = outputs;
                let view = |loc: &Loc| -> Input<'_> {
                    match *loc {
                        Loc::Record(c) => record.get(c as usize).copied().unwrap_or(Input::Empty),
                        Loc::Input(i) => inputs[i as usize].view(text),
                        Loc::Temp(i) => temps[i as usize].view(text),
                        Loc::Output(i) => outs[i as usize].view(text),
                    }
                };
                let xs: SmallVec<[Input<'_>; 8]> = op.inputs.iter().map(view).collect();
                run_kernel(op, &xs, &mut out, &mut ws.scratch)
            };
            let len = out.len();
            match op.out {
                Loc::Temp(i) => ws.temps[i as usize] = out,
                Loc::Output(i) => outputs[i as usize] = out,
                _ => unreachable!(),
            }
            result?;
            if cfg!(debug_assertions) && len > op.bound {
                return Err(KernelError::Capacity {
                    node: op.node,
                    bound: op.bound,
                    needed: len,
                });
            }
        }
        Ok(())
    }

    /// Copies of the prefix's live values, for the materialization cache.
    pub fn capture(&self, outputs: &[DataVector], ws: &Workspace) -> Vec<DataVector> {
        self.desc
            .prefix_live
            .iter()
            .map(|loc| match *loc {
                Loc::Temp(i) => ws.temps[i as usize].compact_clone(),
                Loc::Output(i) => outputs[i as usize].compact_clone(),
                _ => DataVector::default(),
            })
            .collect()
    }

    /// Inverse of [`capture`](Self::capture); reuses buffer capacity.
    pub fn restore(&self, cached: &[DataVector], outputs: &mut [DataVector], ws: &mut Workspace) {
        if ws.temps.len() < self.desc.temps.len() {
            ws.temps.resize_with(self.desc.temps.len(), DataVector::default);
        }
        for (loc, v) in self.desc.prefix_live.iter().zip(cached) {
            match *loc {
                Loc::Temp(i) => ws.temps[i as usize].copy_from(v),
                Loc::Output(i) => outputs[i as usize].copy_from(v),
                _ => {}
            }
        }
    }
}

fn mismatch(op: &BoundOp, expected: &'static str, got: &Input<'_>) -> KernelError {
    KernelError::InputMismatch {
        node: op.node,
        kind: op.kind.name(),
        expected,
        found: got.kind_name(),
    }
}

fn check_len(op: &BoundOp, expected: usize, found: usize) -> Result<(), KernelError> {
    if expected == found {
        Ok(())
    } else {
        Err(KernelError::LengthMismatch {
            node: op.node,
            expected,
            found,
        })
    }
}

fn run_kernel(op: &BoundOp, xs: &[Input<'_>], out: &mut DataVector, scratch: &mut Scratch) -> Result<(), KernelError> {
    let params = op.params.as_deref();
    let x0 = xs.first().copied().unwrap_or(Input::Empty);
    match (op.kernel, params) {
        (Kernel::Select, _) => match x0 {
            Input::Dense(v) => {
                out.reset_dense(v.len()).copy_from_slice(v);
            }
            Input::Scalar(v) => out.set_scalar(v),
            other => return Err(mismatch(op, "numeric column", &other)),
        },
        (Kernel::Tokenize, Some(ParamView::Tokenizer(p))) => match x0 {
            Input::Text(t) => kernels::tokenize(p, t, out),
            other => return Err(mismatch(op, "text", &other)),
        },
        (Kernel::CharNgram, Some(ParamView::Ngram(d))) => match x0.tokens() {
            Some(toks) => kernels::char_ngrams(d, toks, out, scratch),
            None => return Err(mismatch(op, "tokens", &x0)),
        },
        (Kernel::WordNgram, Some(ParamView::Ngram(d))) => match x0 {
            Input::Tokens { text, spans } => kernels::word_ngrams(d, spans, text, out, scratch),
            other => return Err(mismatch(op, "tokens", &other)),
        },
        (Kernel::ConcatDense, _) => {
            if let Some(bad) = xs.iter().find(|x| !matches!(x, Input::Dense(_))) {
                return Err(mismatch(op, "dense vector", bad));
            }
            kernels::concat_dense(xs, out)
        }
        (Kernel::ConcatSparse, _) => {
            if let Some(bad) = xs.iter().find(|x| x.vector_len().is_none()) {
                return Err(mismatch(op, "vector", bad));
            }
            kernels::concat_sparse(xs, out)
        }
        (Kernel::L2Dense | Kernel::L2Sparse, _) => {
            if x0.vector_len().is_none() {
                return Err(mismatch(op, "vector", &x0));
            }
            kernels::normalize_l2(x0, out)
        }
        (Kernel::PcaDense | Kernel::PcaDenseSimd, Some(ParamView::Pca(p))) => match x0 {
            Input::Dense(x) => {
                check_len(op, p.dim, x.len())?;
                if op.kernel == Kernel::PcaDenseSimd {
                    kernels::pca_dense_simd(p, x, out)
                } else {
                    kernels::pca_dense(p, x, out)
                }
            }
            other => return Err(mismatch(op, "dense vector", &other)),
        },
        (Kernel::PcaSparse, Some(ParamView::Pca(p))) => {
            check_len(op, p.dim, x0.vector_len().ok_or_else(|| mismatch(op, "vector", &x0))?)?;
            kernels::pca_sparse(p, x0, out, scratch)
        }
        (Kernel::KMeansDense | Kernel::KMeansDenseSimd, Some(ParamView::KMeans(p))) => match x0 {
            Input::Dense(x) => {
                check_len(op, p.dim, x.len())?;
                if op.kernel == Kernel::KMeansDenseSimd {
                    kernels::kmeans_dense_simd(p, x, out)
                } else {
                    kernels::kmeans_dense(p, x, out)
                }
            }
            other => return Err(mismatch(op, "dense vector", &other)),
        },
        (Kernel::KMeansSparse, Some(ParamView::KMeans(p))) => {
            check_len(op, p.dim, x0.vector_len().ok_or_else(|| mismatch(op, "vector", &x0))?)?;
            kernels::kmeans_sparse(p, x0, out, scratch)
        }
        (Kernel::TreesDense | Kernel::TreesSparse, Some(ParamView::Trees(p))) => {
            let len = x0.vector_len().ok_or_else(|| mismatch(op, "vector", &x0))?;
            if p.min_features() > len {
                return Err(KernelError::LengthMismatch {
                    node: op.node,
                    expected: p.min_features(),
                    found: len,
                });
            }
            out.set_scalar(kernels::trees(p, x0))
        }
        (Kernel::LinearDense | Kernel::LinearDenseSimd | Kernel::LinearSparse, Some(ParamView::Linear(p))) => {
            let s = dot(op, &p.weights, x0)?;
            out.set_scalar(s + p.bias)
        }
        (Kernel::DotDense | Kernel::DotDenseSimd | Kernel::DotSparse, Some(ParamView::Linear(p))) => {
            let end = op.offset + op.len;
            if end > p.weights.len() {
                return Err(KernelError::LengthMismatch {
                    node: op.node,
                    expected: p.weights.len(),
                    found: end,
                });
            }
            let s = dot(op, &p.weights[op.offset..end], x0)?;
            out.set_scalar(s)
        }
        (Kernel::ScoreSum, Some(ParamView::Linear(p))) => {
            let mut s = 0.0;
            for x in xs {
                match x {
                    Input::Scalar(v) => s += v,
                    other => return Err(mismatch(op, "scalar", other)),
                }
            }
            out.set_scalar(s + p.bias)
        }
        (_, _) => return Err(KernelError::MissingParams { node: op.node }),
    }
    Ok(())
}

#[inline]
fn dot(op: &BoundOp, w: &[f64], x: Input<'_>) -> Result<f64, KernelError> {
    let len = x.vector_len().ok_or_else(|| mismatch(op, "vector", &x))?;
    check_len(op, w.len(), len)?;
    Ok(match (op.kernel, x) {
        (Kernel::LinearDenseSimd | Kernel::DotDenseSimd, Input::Dense(v)) => kernels::dot_dense_simd(w, v),
        (_, Input::Dense(v)) => kernels::dot_dense(w, v),
        (Kernel::LinearSparse | Kernel::DotSparse, Input::Sparse { indices, values, .. }) => {
            kernels::dot_sparse(w, indices, values)
        }
        (_, other) => return Err(mismatch(op, "dense vector", &other)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{LinearParams, NgramParams, Params, TokenizerParams};

    fn op(node: u32, key: &str, kind: OpKind, params: Option<Checksum>, inputs: Vec<Loc>, out: Loc) -> OpDesc {
        OpDesc {
            node,
            key: key.into(),
            kind,
            params,
            inputs,
            out,
            text: Some(0),
            offset: 0,
            len: 0,
            bound: 64,
        }
    }

    #[test]
    fn fused_chain_equals_steps() {
        let store = ObjectStore::new();
        let tok = store.put(&Params::Tokenizer(TokenizerParams::default())).unwrap();
        let dict = store
            .put(&Params::Ngram(NgramParams::new(1, vec!["a".into(), "b".into()])))
            .unwrap();
        let w = store
            .put(&Params::Linear(LinearParams {
                weights: vec![2.0, 3.0],
                bias: 0.5,
            }))
            .unwrap();
        let desc = StageDescriptor {
            ops: vec![
                op(
                    1,
                    "tokenize",
                    OpKind::Tokenize,
                    Some(tok),
                    vec![Loc::Record(0)],
                    Loc::Temp(0),
                ),
                op(
                    2,
                    "ngram.word",
                    OpKind::WordNgram,
                    Some(dict),
                    vec![Loc::Temp(0)],
                    Loc::Temp(1),
                ),
                op(
                    3,
                    "linear.sparse",
                    OpKind::LinearBinaryClassifier,
                    Some(w),
                    vec![Loc::Temp(1)],
                    Loc::Output(0),
                ),
            ],
            inputs: 0,
            outputs: vec![1],
            temps: vec![64, 64],
            prefix: 2,
            prefix_live: vec![Loc::Temp(1)],
        };
        let stage = PhysicalStage::instantiate("tokenize>ngram.word>linear.sparse", &desc, &store).unwrap();
        let mut ws = Workspace::new();
        let mut outs = vec![DataVector::default()];
        let rec = [Input::Text("a b b c")];
        stage.execute(&rec, &[], &mut outs, &mut ws, 0).unwrap();
        assert_eq!(outs[0].as_scalar(), Some(2.0 + 6.0 + 0.5));

        let cached = stage.capture(&outs, &ws);
        let mut ws2 = Workspace::new();
        let mut outs2 = vec![DataVector::default()];
        stage.restore(&cached, &mut outs2, &mut ws2);
        stage.execute(&rec, &[], &mut outs2, &mut ws2, desc.prefix).unwrap();
        assert_eq!(outs2, outs);
    }
}
