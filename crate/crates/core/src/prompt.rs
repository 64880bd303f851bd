//! Structured prompts with interchangeable documents, the byte-level
//! tokenizer, and the [`SequenceLayout`] every attention mode consumes.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence token. Ids below 256 are raw bytes.
pub const BOS: u32 = 256;
/// End-of-sequence token.
pub const EOS: u32 = 257;
/// Number of ids the tokenizer can emit (bytes plus BOS/EOS).
pub const TOKENIZER_VOCAB: usize = 258;

/// A prompt split into a prefix, `k` order-agnostic documents and a suffix.
///
/// Anything that should travel with a document (headers, separators,
/// labels) must live inside the document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentedPrompt {
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub documents: Vec<String>,
    #[serde(default)]
    pub suffix: String,
}

impl SegmentedPrompt {
    pub fn new(
        prefix: impl Into<String>,
        documents: Vec<String>,
        suffix: impl Into<String>,
    ) -> Result<Self> {
        let prompt = Self {
            prefix: prefix.into(),
            documents,
            suffix: suffix.into(),
        };
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        match self.documents.iter().position(String::is_empty) {
            Some(i) => Err(Error::EmptyDocument(i)),
            None => Ok(()),
        }
    }

    pub fn k(&self) -> usize {
        self.documents.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let prompt: Self =
            serde_json::from_str(text).map_err(|e| Error::Prompt(e.to_string()))?;
        prompt.validate()?;
        Ok(prompt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt serializes")
    }

    /// Reorders documents so that `result.documents[i] = self.documents[perm[i]]`.
    pub fn permute_documents(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.k())?;
        Ok(Self {
            prefix: self.prefix.clone(),
            documents: perm.iter().map(|&i| self.documents[i].clone()).collect(),
            suffix: self.suffix.clone(),
        })
    }
}

/// Reads a JSON prompt file with keys `prefix`, `documents` and `suffix`.
pub fn parse_prompt_file(path: impl AsRef<Path>) -> Result<SegmentedPrompt> {
    let text = std::fs::read_to_string(path)?;
    SegmentedPrompt::from_json(&text)
}

pub fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    if perm.len() != k {
        return Err(Error::Permutation(format!(
            "expected {k} entries, got {}",
            perm.len()
        )));
    }
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Permutation(format!("{perm:?} is not a bijection")));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    check_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}

/// Which segment a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Prefix,
    Document(usize),
    Suffix,
}

/// Partition of `[0, n)` into prefix, `k` document spans and a suffix.
///
/// Tokens appended during decoding extend the suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    n: usize,
    prefix_len: usize,
    doc_spans: Vec<Range<usize>>,
    suffix_start: usize,
}

impl SequenceLayout {
    /// Builds a layout from segment lengths laid out back to back.
    pub fn from_lengths(prefix_len: usize, doc_lens: &[usize], suffix_len: usize) -> Result<Self> {
        let mut cursor = prefix_len;
        let mut doc_spans = Vec::with_capacity(doc_lens.len());
        for (i, &len) in doc_lens.iter().enumerate() {
            if len == 0 {
                return Err(Error::Layout(format!("document {i} has no tokens")));
            }
            doc_spans.push(cursor..cursor + len);
            cursor += len;
        }
        Ok(Self {
            n: cursor + suffix_len,
            prefix_len,
            doc_spans,
            suffix_start: cursor,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.doc_spans.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn prefix_span(&self) -> Range<usize> {
        0..self.prefix_len
    }

    pub fn doc_spans(&self) -> &[Range<usize>] {
        &self.doc_spans
    }

    pub fn doc_span(&self, doc: usize) -> Range<usize> {
        self.doc_spans[doc].clone()
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_spans[doc].len()
    }

    pub fn max_doc_len(&self) -> usize {
        self.doc_spans.iter().map(Range::len).max().unwrap_or(0)
    }

    pub fn suffix_start(&self) -> usize {
        self.suffix_start
    }

    pub fn suffix_len(&self) -> usize {
        self.n - self.suffix_start
    }

    /// Identity positions `0..n`.
    pub fn input_positions(&self) -> Range<usize> {
        0..self.n
    }

    pub fn region(&self, index: usize) -> Region {
        if index < self.prefix_len {
            Region::Prefix
        } else if index >= self.suffix_start {
            Region::Suffix
        } else {
            let doc = self.doc_spans.partition_point(|s| s.end <= index);
            Region::Document(doc)
        }
    }

    /// Grows the suffix by `count` tokens.
    pub fn extend(&mut self, count: usize) {
        self.n += count;
    }

    /// The layout truncated to its first `len` tokens, which must not cut
    /// into a document.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if len < self.suffix_start || len > self.n {
            return Err(Error::Layout(format!(
                "cannot truncate layout of {} tokens to {len}",
                self.n
            )));
        }
        Ok(Self {
            n: len,
            ..self.clone()
        })
    }
}

/// Byte-level tokenizer: each UTF-8 byte is one token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// Prepend [`BOS`] to the prefix.
    pub bos: bool,
}

impl Tokenizer {
    pub fn with_bos() -> Self {
        Self { bos: true }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn tokenize(&self, prompt: &SegmentedPrompt) -> (Vec<u32>, SequenceLayout) {
        let mut tokens = Vec::new();
        if self.bos {
            tokens.push(BOS);
        }
        tokens.extend(self.encode(&prompt.prefix));
        let prefix_len = tokens.len();
        let mut doc_lens = Vec::with_capacity(prompt.k());
        for doc in &prompt.documents {
            let ids = self.encode(doc);
            doc_lens.push(ids.len());
            tokens.extend(ids);
        }
        let suffix = self.encode(&prompt.suffix);
        let suffix_len = suffix.len();
        tokens.extend(suffix);
        let layout = SequenceLayout::from_lengths(prefix_len, &doc_lens, suffix_len)
            .expect("validated prompts have non-empty documents");
        (tokens, layout)
    }

    /// Bytes are decoded as UTF-8 (lossily); special ids render as markers.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        };
        for &t in tokens {
            if t < 256 {
                bytes.push(t as u8);
                continue;
            }
            flush(&mut bytes, &mut out);
            match t {
                BOS => out.push_str("<|bos|>"),
                EOS => out.push_str("<|eos|>"),
                other => out.push_str(&format!("<|{other}|>")),
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}
