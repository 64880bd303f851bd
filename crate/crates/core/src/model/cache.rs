use crate::error::{Error, Result};
use crate::pine::DocumentKeys;
use crate::prompt::SequenceLayout;
use crate::tensor::Tensor;

/// Per-layer keys and values for every processed token.
///
/// Keys are kept *before* rotary rotation: PINE rotates the same key to a
/// different position for each query group, so rotation happens at query
/// time. Storage is one contiguous `[n × d_head]` buffer per key/value head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_head: usize,
    max_len: usize,
    /// `k[layer][kv_head]`
    k: Vec<Vec<Vec<f32>>>,
    v: Vec<Vec<Vec<f32>>>,
    tokens: Vec<u32>,
    layout: SequenceLayout,
    doc_keys: DocumentKeys,
    /// Comparator invocations spent ordering documents so far.
    pub comparisons: u64,
}

impl KvCache {
    pub(crate) fn new(
        n_layers: usize,
        n_kv_heads: usize,
        d_head: usize,
        max_len: usize,
        tokens: &[u32],
        layout: SequenceLayout,
    ) -> Self {
        let doc_keys = DocumentKeys::new(tokens, &layout);
        Self {
            d_head,
            max_len,
            k: vec![vec![Vec::new(); n_kv_heads]; n_layers],
            v: vec![vec![Vec::new(); n_kv_heads]; n_layers],
            tokens: tokens.to_vec(),
            layout,
            doc_keys,
            comparisons: 0,
        }
    }

    /// Number of tokens whose keys and values are cached.
    pub fn n_cached(&self) -> usize {
        self.k
            .first()
            .and_then(|l| l.first())
            .map_or(0, |k| k.len() / self.d_head)
    }

    pub fn is_empty(&self) -> bool {
        self.n_cached() == 0
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn doc_keys(&self) -> &DocumentKeys {
        &self.doc_keys
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Un-rotated keys of one layer as `[n_cached × n_kv_heads × d_head]`.
    pub fn k_raw(&self, layer: usize) -> Tensor {
        self.interleave(&self.k[layer])
    }

    /// Values of one layer as `[n_cached × n_kv_heads × d_head]`.
    pub fn values(&self, layer: usize) -> Tensor {
        self.interleave(&self.v[layer])
    }

    fn interleave(&self, heads: &[Vec<f32>]) -> Tensor {
        let n = self.n_cached();
        let d = self.d_head;
        let mut data = Vec::with_capacity(n * heads.len() * d);
        for t in 0..n {
            for h in heads {
                data.extend_from_slice(&h[t * d..(t + 1) * d]);
            }
        }
        Tensor::new(vec![n, heads.len(), d], data).expect("consistent cache")
    }

    pub(crate) fn head_k(&self, layer: usize, kv_head: usize) -> &[f32] {
        &self.k[layer][kv_head]
    }

    pub(crate) fn head_v(&self, layer: usize, kv_head: usize) -> &[f32] {
        &self.v[layer][kv_head]
    }

    /// Appends rows of `k` and `v` (`[t × n_kv_heads·d_head]`) to `layer`.
    pub(crate) fn append(&mut self, layer: usize, k: &Tensor, v: &Tensor) {
        let d = self.d_head;
        for (heads, src) in [(&mut self.k[layer], k), (&mut self.v[layer], v)] {
            for row in src.rows() {
                for (h, buf) in heads.iter_mut().enumerate() {
                    buf.extend_from_slice(&row[h * d..(h + 1) * d]);
                }
            }
        }
    }

    /// Registers one more token at the end of the suffix.
    pub(crate) fn push_token(&mut self, token: u32) -> Result<()> {
        if self.tokens.len() >= self.max_len {
            return Err(Error::SequenceTooLong {
                len: self.tokens.len() + 1,
                max: self.max_len,
            });
        }
        self.tokens.push(token);
        self.layout.extend(1);
        Ok(())
    }
}
