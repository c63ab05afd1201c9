use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::Density;

use super::KernelError;

/// Operator kinds as the physical layer sees them, including the two produced by
/// splitting a linear model across a concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Select,
    Tokenize,
    CharNgram,
    WordNgram,
    Concat,
    NormalizeL2,
    PcaProject,
    KMeansFeaturize,
    TreeEnsemble,
    LinearBinaryClassifier,
    PartialDot,
    ScoreSum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Select => "Select",
            OpKind::Tokenize => "Tokenize",
            OpKind::CharNgram => "CharNgram",
            OpKind::WordNgram => "WordNgram",
            OpKind::Concat => "Concat",
            OpKind::NormalizeL2 => "NormalizeL2",
            OpKind::PcaProject => "PcaProject",
            OpKind::KMeansFeaturize => "KMeansFeaturize",
            OpKind::TreeEnsemble => "TreeEnsemble",
            OpKind::LinearBinaryClassifier => "LinearBinaryClassifier",
            OpKind::PartialDot => "PartialDot",
            OpKind::ScoreSum => "ScoreSum",
        }
    }

    /// Static annotation: these run one at a time rather than fused into a chain.
    pub fn is_compute_bound(self) -> bool {
        matches!(
            self,
            OpKind::LinearBinaryClassifier
                | OpKind::PcaProject
                | OpKind::KMeansFeaturize
                | OpKind::TreeEnsemble
                | OpKind::PartialDot
        )
    }

    /// Needs all of its input materialized before successors can run.
    pub fn is_pipeline_breaker(self) -> bool {
        matches!(self, OpKind::Concat | OpKind::NormalizeL2)
    }

    /// Featurizers may be served from the materialization cache; predictors may not.
    pub fn is_featurizer(self) -> bool {
        !matches!(
            self,
            OpKind::TreeEnsemble | OpKind::LinearBinaryClassifier | OpKind::PartialDot | OpKind::ScoreSum
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Fused,
    Compute { vectorizable: bool },
}

/// What a kernel is selected by. `density` is that of the (combined) vector input, or
/// `None` for operators over text, tokens or scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub kind: OpKind,
    pub density: Option<Density>,
    pub mode: Mode,
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind)?;
        match self.density {
            Some(d) => write!(f, "{d}")?,
            None => f.write_str("-")?,
        }
        match self.mode {
            Mode::Fused => f.write_str(", fused)"),
            Mode::Compute { vectorizable } => write!(f, ", compute, vectorizable={vectorizable})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    Select,
    Tokenize,
    CharNgram,
    WordNgram,
    ConcatDense,
    ConcatSparse,
    L2Dense,
    L2Sparse,
    PcaDense,
    PcaDenseSimd,
    PcaSparse,
    KMeansDense,
    KMeansDenseSimd,
    KMeansSparse,
    TreesDense,
    TreesSparse,
    LinearDense,
    LinearDenseSimd,
    LinearSparse,
    DotDense,
    DotDenseSimd,
    DotSparse,
    ScoreSum,
}

#[derive(Clone, Copy, Debug)]
pub struct KernelEntry {
    pub key: &'static str,
    pub signature: Signature,
    pub kernel: Kernel,
}

const fn entry(key: &'static str, kind: OpKind, density: Option<Density>, mode: Mode, kernel: Kernel) -> KernelEntry {
    KernelEntry {
        key,
        signature: Signature { kind, density, mode },
        kernel,
    }
}

const D: Option<Density> = Some(Density::Dense);
const S: Option<Density> = Some(Density::Sparse);
const F: Mode = Mode::Fused;
const C: Mode = Mode::Compute { vectorizable: false };
const V: Mode = Mode::Compute { vectorizable: true };

static REGISTRY: &[KernelEntry] = &[
    entry("select", OpKind::Select, None, F, Kernel::Select),
    entry("select", OpKind::Select, D, F, Kernel::Select),
    entry("select", OpKind::Select, S, F, Kernel::Select),
    entry("tokenize", OpKind::Tokenize, None, F, Kernel::Tokenize),
    entry("ngram.char", OpKind::CharNgram, None, F, Kernel::CharNgram),
    entry("ngram.word", OpKind::WordNgram, None, F, Kernel::WordNgram),
    entry("concat.dense", OpKind::Concat, D, F, Kernel::ConcatDense),
    entry("concat.sparse", OpKind::Concat, S, F, Kernel::ConcatSparse),
    entry("l2.dense", OpKind::NormalizeL2, D, F, Kernel::L2Dense),
    entry("l2.sparse", OpKind::NormalizeL2, S, F, Kernel::L2Sparse),
    entry("pca.dense", OpKind::PcaProject, D, C, Kernel::PcaDense),
    entry("pca.dense.simd", OpKind::PcaProject, D, V, Kernel::PcaDenseSimd),
    entry("pca.sparse", OpKind::PcaProject, S, C, Kernel::PcaSparse),
    entry("kmeans.dense", OpKind::KMeansFeaturize, D, C, Kernel::KMeansDense),
    entry(
        "kmeans.dense.simd",
        OpKind::KMeansFeaturize,
        D,
        V,
        Kernel::KMeansDenseSimd,
    ),
    entry("kmeans.sparse", OpKind::KMeansFeaturize, S, C, Kernel::KMeansSparse),
    entry("trees.dense", OpKind::TreeEnsemble, D, C, Kernel::TreesDense),
    entry("trees.dense", OpKind::TreeEnsemble, D, V, Kernel::TreesDense),
    entry("trees.sparse", OpKind::TreeEnsemble, S, C, Kernel::TreesSparse),
    entry(
        "linear.dense",
        OpKind::LinearBinaryClassifier,
        D,
        C,
        Kernel::LinearDense,
    ),
    entry(
        "linear.dense.simd",
        OpKind::LinearBinaryClassifier,
        D,
        V,
        Kernel::LinearDenseSimd,
    ),
    entry(
        "linear.sparse",
        OpKind::LinearBinaryClassifier,
        S,
        C,
        Kernel::LinearSparse,
    ),
    entry("dot.dense", OpKind::PartialDot, D, C, Kernel::DotDense),
    entry("dot.dense.simd", OpKind::PartialDot, D, V, Kernel::DotDenseSimd),
    entry("dot.sparse", OpKind::PartialDot, S, C, Kernel::DotSparse),
    entry("score.sum", OpKind::ScoreSum, None, F, Kernel::ScoreSum),
];

/// Every registered kernel, for diagnostics.
pub fn entries() -> &'static [KernelEntry] {
    REGISTRY
}

pub fn lookup(sig: Signature) -> Result<&'static KernelEntry, KernelError> {
    REGISTRY
        .iter()
        .find(|e| e.signature == sig)
        .ok_or_else(|| KernelError::Unregistered(sig.to_string()))
}

pub fn by_key(key: &str) -> Option<&'static KernelEntry> {
    REGISTRY.iter().find(|e| e.key == key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_selection_by_label() {
        let dense = lookup(Signature {
            kind: OpKind::LinearBinaryClassifier,
            density: D,
            mode: V,
        })
        .unwrap();
        assert_eq!(dense.key, "linear.dense.simd");
        let sparse = lookup(Signature {
            kind: OpKind::LinearBinaryClassifier,
            density: S,
            mode: C,
        })
        .unwrap();
        assert_eq!(sparse.key, "linear.sparse");
    }

    #[test]
    fn unregistered_signature_is_named() {
        let err = lookup(Signature {
            kind: OpKind::Tokenize,
            density: None,
            mode: C,
        })
        .unwrap_err();
        assert!(err.to_string().contains("Tokenize(-, compute"), "{err}");
    }

    #[test]
    fn keys_resolve() {
        for e in entries() {
            assert!(by_key(e.key).is_some());
        }
    }
}
