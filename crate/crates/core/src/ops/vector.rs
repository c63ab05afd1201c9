use std::fmt;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Repr {
    #[default]
    Empty,
    Dense,
    Sparse,
    /// Token spans: `indices` holds `(start, end)` byte offsets into the source text.
    Tokens,
    Scalar,
}

/// A pooled buffer holding one value flowing between operators.
///
/// Kernels rewrite a vector in place through the `reset_*` methods, which keep the
/// underlying capacity, so a vector that came out of a pool with enough room never
/// reallocates.
#[derive(Clone, Default, PartialEq)]
pub struct DataVector {
    repr: Repr,
    len: usize,
    values: Vec<f64>,
    indices: Vec<u32>,
}

impl fmt::Debug for DataVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.repr {
            Repr::Empty => f.write_str("Empty"),
            Repr::Dense => write!(f, "Dense{:?}", self.values),
            Repr::Sparse => {
                write!(f, "Sparse(len={}){{", self.len)?;
                for (i, v) in self.indices.iter().zip(&self.values) {
                    write!(f, "{i}:{v},")?;
                }
                f.write_str("}")
            }
            Repr::Tokens => write!(f, "Tokens{:?}", self.indices),
            Repr::Scalar => write!(f, "Scalar({})", self.values[0]),
        }
    }
}

impl DataVector {
    pub fn with_capacity(cap: usize) -> Self {
        DataVector {
            repr: Repr::Empty,
            len: 0,
            values: Vec::with_capacity(cap),
            indices: Vec::with_capacity(cap),
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        DataVector {
            repr: Repr::Dense,
            len: values.len(),
            values: values.to_vec(),
            indices: Vec::new(),
        }
    }

    /// Panics unless indices are strictly increasing and below `len`.
    pub fn from_sparse(len: usize, indices: &[u32], values: &[f64]) -> Self {
        assert_eq!(indices.len(), values.len());
        assert!(indices.windows(2).all(|w| w[0] < w[1]));
        assert!(indices.last().is_none_or(|&i| (i as usize) < len));
        DataVector {
            repr: Repr::Sparse,
            len,
            values: values.to_vec(),
            indices: indices.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        DataVector {
            repr: Repr::Scalar,
            len: 1,
            values: vec![v],
            indices: Vec::new(),
        }
    }

    pub fn repr(&self) -> Repr {
        self.repr
    }

    /// Logical length: vector length, token count, or 1 for scalars.
    pub fn len(&self) -> usize {
        match self.repr {
            Repr::Tokens => self.indices.len() / 2,
            _ => self.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        match self.repr {
            Repr::Sparse => self.indices.len(),
            Repr::Dense | Repr::Scalar => self.values.len(),
            _ => 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.values.capacity().min(self.indices.capacity())
    }

    /// Grows both buffers to hold `cap` entries. No-op when already large enough.
    pub fn ensure_capacity(&mut self, cap: usize) {
        if self.values.capacity() < cap {
            self.values.reserve(cap - self.values.len());
        }
        if self.indices.capacity() < cap {
            self.indices.reserve(cap - self.indices.len());
        }
    }

    pub fn payload_bytes(&self) -> usize {
        self.values.len() * 8 + self.indices.len() * 4
    }

    pub fn clear(&mut self) {
        self.repr = Repr::Empty;
        self.len = 0;
        self.values.clear();
        self.indices.clear();
    }

    pub fn reset_dense(&mut self, len: usize) -> &mut [f64] {
        self.repr = Repr::Dense;
        self.len = len;
        self.indices.clear();
        self.values.clear();
        self.values.resize(len, 0.0);
        &mut self.values
    }

    pub fn reset_sparse(&mut self, len: usize) {
        self.repr = Repr::Sparse;
        self.len = len;
        self.values.clear();
        self.indices.clear();
    }

    #[inline]
    pub fn push_sparse(&mut self, index: u32, value: f64) {
        debug_assert!(self.repr == Repr::Sparse);
        debug_assert!(self.indices.last().is_none_or(|&l| l < index));
        self.indices.push(index);
        self.values.push(value);
    }

    pub fn reset_tokens(&mut self) {
        self.repr = Repr::Tokens;
        self.len = 0;
        self.values.clear();
        self.indices.clear();
    }

    #[inline]
    pub fn push_span(&mut self, start: usize, end: usize) {
        self.indices.push(start as u32);
        self.indices.push(end as u32);
    }

    pub fn set_scalar(&mut self, v: f64) {
        self.repr = Repr::Scalar;
        self.len = 1;
        self.indices.clear();
        self.values.clear();
        self.values.push(v);
    }

    /// Overwrites `self` with `other`, reusing capacity.
    pub fn copy_from(&mut self, other: &DataVector) {
        self.repr = other.repr;
        self.len = other.len;
        self.values.clear();
        self.values.extend_from_slice(&other.values);
        self.indices.clear();
        self.indices.extend_from_slice(&other.indices);
    }

    /// Exact-size copy, for storing outside a pool.
    pub fn compact_clone(&self) -> DataVector {
        DataVector {
            repr: self.repr,
            len: self.len,
            values: self.values.clone(),
            indices: self.indices.clone(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self.repr {
            Repr::Scalar => Some(self.values[0]),
            _ => None,
        }
    }

    /// Dense copy of a numeric vector; scalars become length-1 vectors.
    pub fn to_dense(&self) -> Option<Vec<f64>> {
        match self.repr {
            Repr::Dense | Repr::Scalar => Some(self.values.clone()),
            Repr::Sparse => {
                let mut out = vec![0.0; self.len];
                for (i, v) in self.indices.iter().zip(&self.values) {
                    out[*i as usize] = *v;
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Borrowed view. Token vectors need the text their spans point into.
    pub fn view<'a>(&'a self, text: Option<&'a str>) -> Input<'a> {
        match self.repr {
            Repr::Dense => Input::Dense(&self.values),
            Repr::Sparse => Input::Sparse {
                len: self.len,
                indices: &self.indices,
                values: &self.values,
            },
            Repr::Scalar => Input::Scalar(self.values[0]),
            Repr::Tokens => Input::Tokens {
                text: text.unwrap_or(""),
                spans: &self.indices,
            },
            Repr::Empty => Input::Empty,
        }
    }
}

/// Read-only view of an operator input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Input<'a> {
    Empty,
    Text(&'a str),
    Tokens {
        text: &'a str,
        spans: &'a [u32],
    },
    Dense(&'a [f64]),
    Sparse {
        len: usize,
        indices: &'a [u32],
        values: &'a [f64],
    },
    Scalar(f64),
}

impl<'a> Input<'a> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Input::Empty => "empty",
            Input::Text(_) => "text",
            Input::Tokens { .. } => "tokens",
            Input::Dense(_) => "dense vector",
            Input::Sparse { .. } => "sparse vector",
            Input::Scalar(_) => "scalar",
        }
    }

    pub fn vector_len(&self) -> Option<usize> {
        match self {
            Input::Dense(v) => Some(v.len()),
            Input::Sparse { len, .. } => Some(*len),
            _ => None,
        }
    }

    /// Iterates token strings.
    pub fn tokens(&self) -> Option<impl Iterator<Item = &'a str> + Clone + 'a> {
        match *self {
            Input::Tokens { text, spans } => {
                Some(spans.chunks_exact(2).map(move |s| &text[s[0] as usize..s[1] as usize]))
            }
            _ => None,
        }
    }

    /// Random access into a numeric vector; sparse lookups are a binary search.
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Input::Dense(v) => v.get(i).copied().unwrap_or(0.0),
            Input::Sparse { indices, values, .. } => match indices.binary_search(&(i as u32)) {
                Ok(p) => values[p],
                Err(_) => 0.0,
            },
            Input::Scalar(v) if i == 0 => *v,
            _ => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_keeps_capacity() {
        let mut v = DataVector::with_capacity(128);
        let cap = v.capacity();
        v.reset_dense(100);
        v.reset_sparse(1000);
        for i in 0..100 {
            v.push_sparse(i, 1.0);
        }
        v.set_scalar(3.0);
        assert_eq!(v.capacity(), cap);
        assert_eq!(v.as_scalar(), Some(3.0));
    }

    #[test]
    fn sparse_view_random_access() {
        let v = DataVector::from_sparse(10, &[2, 7], &[1.5, -1.0]);
        let x = v.view(None);
        assert_eq!(x.get(7), -1.0);
        assert_eq!(x.get(3), 0.0);
        assert_eq!(v.to_dense().unwrap()[2], 1.5);
    }

    #[test]
    fn token_view_yields_slices() {
        let text = "ab cd";
        let mut v = DataVector::with_capacity(8);
        v.reset_tokens();
        v.push_span(0, 2);
        v.push_span(3, 5);
        let toks: Vec<_> = v.view(Some(text)).tokens().unwrap().collect();
        assert_eq!(toks, ["ab", "cd"]);
        assert_eq!(v.len(), 2);
    }
}
