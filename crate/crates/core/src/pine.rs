//! Importance-sorted position re-assignment.
//!
//! Each query group (a whole document, or a single token after the
//! documents) scores every candidate document with position-free attention:
//! raw queries against raw keys, softmax over all candidate-document tokens,
//! pooled per document. Candidates are then laid out in contiguous position
//! blocks after the prefix, least important first, so the most important
//! document sits next to the query. A document query always occupies the
//! last block itself.
//!
//! Nothing in that computation reads the input order of the documents:
//! candidates are visited in content-hash order and ties are broken by
//! content hash, so every group gets the same positions for every
//! permutation of the input.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::ops::Range;

use fnv::FnvHasher;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::modes::{attention_forward, Aggregation, AttentionContext, AttentionMode, HeadInputs, Variant};
use crate::prompt::{Region, SequenceLayout};
use crate::tensor::{dot, row_softmax, Tensor};

/// 64-bit FNV-1a over the little-endian bytes of `tokens`.
pub fn content_hash(tokens: &[u32]) -> u64 {
    let mut h = FnvHasher::default();
    for t in tokens {
        h.write(&t.to_le_bytes());
    }
    h.finish()
}

/// Order-independent identity of every document: its content hash and its
/// rank when documents are sorted by `(hash, input index)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentKeys {
    hashes: Vec<u64>,
    ranks: Vec<usize>,
    order: Vec<usize>,
}

impl DocumentKeys {
    pub fn new(tokens: &[u32], layout: &SequenceLayout) -> Self {
        let hashes: Vec<u64> = layout
            .doc_spans()
            .iter()
            .map(|s| content_hash(&tokens[s.clone()]))
            .collect();
        let mut order: Vec<usize> = (0..hashes.len()).collect();
        order.sort_by_key(|&d| (hashes[d], d));
        let mut ranks = vec![0; hashes.len()];
        for (rank, &d) in order.iter().enumerate() {
            ranks[d] = rank;
        }
        Self {
            hashes,
            ranks,
            order,
        }
    }

    pub fn hash(&self, doc: usize) -> u64 {
        self.hashes[doc]
    }

    pub fn canonical_rank(&self, doc: usize) -> usize {
        self.ranks[doc]
    }

    /// Documents sorted by `(hash, input index)`.
    pub fn canonical_order(&self) -> &[usize] {
        &self.order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum GroupKind {
    Document(usize),
    Token(usize),
}

/// Queries that share one document ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryGroup {
    pub kind: GroupKind,
    pub query_tokens: Range<usize>,
    /// Documents to be ordered, by input index. Never includes the query's
    /// own document.
    pub candidate_docs: Vec<usize>,
}

impl QueryGroup {
    pub fn for_document(layout: &SequenceLayout, doc: usize) -> Self {
        Self {
            kind: GroupKind::Document(doc),
            query_tokens: layout.doc_span(doc),
            candidate_docs: (0..layout.k()).filter(|&d| d != doc).collect(),
        }
    }

    pub fn for_token(layout: &SequenceLayout, token: usize) -> Self {
        Self {
            kind: GroupKind::Token(token),
            query_tokens: token..token + 1,
            candidate_docs: (0..layout.k()).collect(),
        }
    }

    /// The group a query token belongs to, or `None` for prefix tokens.
    pub fn of_query(layout: &SequenceLayout, q: usize) -> Option<Self> {
        match layout.region(q) {
            Region::Prefix => None,
            Region::Document(d) => Some(Self::for_document(layout, d)),
            Region::Suffix => Some(Self::for_token(layout, q)),
        }
    }

    pub fn pinned_doc(&self) -> Option<usize> {
        match self.kind {
            GroupKind::Document(d) => Some(d),
            GroupKind::Token(_) => None,
        }
    }

    fn label(&self) -> String {
        match self.kind {
            GroupKind::Document(d) => format!("doc:{d}"),
            GroupKind::Token(t) => format!("token:{t}"),
        }
    }
}

/// Position-free attention probabilities of `queries: [r × d]` over
/// `keys: [m × d]`, each row normalized over all `m` keys. With no keys the
/// result is `[r × 0]`.
pub fn token_importance(queries: &Tensor, keys: &Tensor, d_head: usize) -> Result<Tensor> {
    let (r, dq) = queries.dims2()?;
    let (m, dk) = keys.dims2()?;
    if dq != d_head || dk != d_head {
        return Err(Error::Shape(format!(
            "token_importance expects rows of width {d_head}, got {dq} and {dk}"
        )));
    }
    if m == 0 {
        return Ok(Tensor::zeros(vec![r, 0]));
    }
    let mut logits = Vec::with_capacity(r * m);
    for i in 0..r {
        for j in 0..m {
            logits.push(dot(queries.row(i), keys.row(j)));
        }
    }
    let logits = Tensor::new(vec![r, m], logits)?;
    row_softmax(&logits, 1.0 / (d_head as f32).sqrt())
}

/// Pools `probs` (columns grouped into consecutive blocks of `block_lens`)
/// into one score per block.
pub fn doc_importance(probs: &Tensor, block_lens: &[usize], aggregation: Aggregation) -> Result<Vec<f32>> {
    let (rows, cols) = probs.dims2()?;
    if block_lens.iter().sum::<usize>() != cols {
        return Err(Error::Shape(format!(
            "blocks {block_lens:?} do not cover {cols} columns"
        )));
    }
    let mut scores = Vec::with_capacity(block_lens.len());
    let mut start = 0;
    for &len in block_lens {
        let block = start..start + len;
        let mut acc = 0.0f32;
        for i in 0..rows {
            for &p in &probs.row(i)[block.clone()] {
                acc = match aggregation {
                    Aggregation::Max => acc.max(p),
                    Aggregation::Mean | Aggregation::Sum => acc + p,
                };
            }
        }
        if aggregation == Aggregation::Mean {
            acc /= len as f32;
        }
        scores.push(acc);
        start += len;
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// More important documents get positions closer to the query.
    #[default]
    Closer,
    /// More important documents are placed farther away.
    Reversed,
}

impl Direction {
    pub fn of(variant: Variant) -> Self {
        match variant {
            Variant::PineReverse => Direction::Reversed,
            _ => Direction::Closer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DocScore {
    pub doc: usize,
    pub score: f32,
}

/// Stable top-down merge sort; makes at most `n ⌈log₂ n⌉` comparisons.
fn merge_sort_by<T: Copy>(items: &mut [T], cmp: &mut impl FnMut(&T, &T) -> Ordering) {
    let n = items.len();
    if n <= 1 {
        return;
    }
    let mid = n / 2;
    merge_sort_by(&mut items[..mid], cmp);
    merge_sort_by(&mut items[mid..], cmp);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if cmp(&items[j], &items[i]) == Ordering::Less {
            merged.push(items[j]);
            j += 1;
        } else {
            merged.push(items[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&items[i..mid]);
    merged.extend_from_slice(&items[j..n]);
    items.copy_from_slice(&merged);
}

/// Block order for candidate documents, first block first.
///
/// `Closer` sorts by ascending score, `Reversed` by descending score; ties
/// go to the smaller content hash, then the smaller input index. `pinned`
/// (the query's own document) is appended last. Every comparator call is
/// added to `comparisons`.
pub fn order_documents(
    scores: &[DocScore],
    keys: &DocumentKeys,
    direction: Direction,
    pinned: Option<usize>,
    comparisons: &mut u64,
) -> Result<Vec<usize>> {
    if let Some(bad) = scores.iter().find(|s| s.score.is_nan()) {
        return Err(Error::NanScore(bad.doc));
    }
    let mut sorted = scores.to_vec();
    merge_sort_by(&mut sorted, &mut |a: &DocScore, b: &DocScore| {
        *comparisons += 1;
        let by_score = a.score.total_cmp(&b.score);
        let by_score = match direction {
            Direction::Closer => by_score,
            Direction::Reversed => by_score.reverse(),
        };
        by_score
            .then(keys.hash(a.doc).cmp(&keys.hash(b.doc)))
            .then(a.doc.cmp(&b.doc))
    });
    let mut order: Vec<usize> = sorted.into_iter().map(|s| s.doc).collect();
    order.extend(pinned);
    Ok(order)
}

/// Position of every token `0..n` as a key for `group`.
///
/// The prefix keeps `0..L_pre`; documents fill contiguous blocks from
/// `L_pre` in `order`, each in token order; the suffix keeps its input
/// positions. A document query's own tokens take their positions inside
/// the final block.
pub fn pine_key_positions(layout: &SequenceLayout, order: &[usize], group: &QueryGroup) -> Vec<usize> {
    debug_assert!(group.pinned_doc().is_none_or(|d| order.last() == Some(&d)));
    let mut positions: Vec<usize> = layout.input_positions().collect();
    let mut cursor = layout.prefix_len();
    for &doc in order {
        for (offset, token) in layout.doc_span(doc).enumerate() {
            positions[token] = cursor + offset;
        }
        cursor += layout.doc_len(doc);
    }
    positions
}

/// Scores and block order for one query group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupImportance {
    pub group: QueryGroup,
    /// One entry per candidate, by input index.
    pub scores: Vec<DocScore>,
    /// Full block order, including the pinned query document.
    pub order: Vec<usize>,
}

/// Importance of every query group handled by one attention head call.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct HeadImportance {
    docs: BTreeMap<usize, GroupImportance>,
    tokens: BTreeMap<usize, GroupImportance>,
    comparisons: u64,
}

impl HeadImportance {
    pub fn doc_group(&self, doc: usize) -> Option<&GroupImportance> {
        self.docs.get(&doc)
    }

    pub fn token_group(&self, token: usize) -> Option<&GroupImportance> {
        self.tokens.get(&token)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupImportance> {
        self.docs.values().chain(self.tokens.values())
    }

    /// Comparator invocations spent ordering documents.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }
}

fn group_importance(
    group: QueryGroup,
    mode: AttentionMode,
    inputs: &HeadInputs<'_>,
    ctx: &AttentionContext<'_>,
    comparisons: &mut u64,
) -> Result<GroupImportance> {
    let d = inputs.d_head;
    let layout = ctx.layout;
    let mut q_data = Vec::with_capacity(group.query_tokens.len() * d);
    for t in group.query_tokens.clone() {
        q_data.extend_from_slice(inputs.query_row(t - inputs.query_start));
    }
    let queries = Tensor::new(vec![group.query_tokens.len(), d], q_data)?;

    // Candidates in content-hash order so the softmax normalizer is summed
    // identically for every input permutation.
    let candidates: Vec<usize> = ctx
        .doc_keys
        .canonical_order()
        .iter()
        .copied()
        .filter(|&doc| Some(doc) != group.pinned_doc())
        .collect();
    let mut k_data = Vec::new();
    let mut block_lens = Vec::with_capacity(candidates.len());
    for &doc in &candidates {
        for t in layout.doc_span(doc) {
            k_data.extend_from_slice(inputs.key_row(t));
        }
        block_lens.push(layout.doc_len(doc));
    }
    let keys = Tensor::new(vec![k_data.len() / d, d], k_data)?;
    let probs = token_importance(&queries, &keys, d)?;
    let pooled = doc_importance(&probs, &block_lens, mode.aggregation)?;
    let mut scores: Vec<DocScore> = candidates
        .iter()
        .zip(pooled)
        .map(|(&doc, score)| DocScore { doc, score })
        .collect();
    scores.sort_by_key(|s| s.doc);
    let order = order_documents(
        &scores,
        ctx.doc_keys,
        Direction::of(mode.variant),
        group.pinned_doc(),
        comparisons,
    )?;
    Ok(GroupImportance {
        group,
        scores,
        order,
    })
}

/// Computes the importance table for every group whose queries are in
/// `inputs`. Document groups need all of their tokens present.
pub fn head_importance(
    mode: AttentionMode,
    inputs: &HeadInputs<'_>,
    ctx: &AttentionContext<'_>,
    comparisons: &mut u64,
) -> Result<HeadImportance> {
    let layout = ctx.layout;
    let queries = inputs.query_start..inputs.query_start + inputs.n_queries();
    let mut table = HeadImportance::default();
    let before = *comparisons;
    for doc in 0..layout.k() {
        let span = layout.doc_span(doc);
        let inside = queries.start <= span.start && span.end <= queries.end;
        let disjoint = span.end <= queries.start || span.start >= queries.end;
        if inside {
            let group = QueryGroup::for_document(layout, doc);
            let g = group_importance(group, mode, inputs, ctx, comparisons)?;
            table.docs.insert(doc, g);
        } else if !disjoint {
            return Err(Error::Layout(format!(
                "document {doc} is split across attention calls"
            )));
        }
    }
    for token in queries.start.max(layout.suffix_start())..queries.end {
        let group = QueryGroup::for_token(layout, token);
        let g = group_importance(group, mode, inputs, ctx, comparisons)?;
        table.tokens.insert(token, g);
    }
    table.comparisons = *comparisons - before;
    Ok(table)
}

/// PINE attention for one head: importance, ordering, re-assigned
/// positions, then the shared attention kernel.
pub fn pine_attention(
    mode: AttentionMode,
    inputs: &HeadInputs<'_>,
    ctx: &AttentionContext<'_>,
) -> Result<(Vec<f32>, HeadImportance)> {
    let mut comparisons = 0;
    let importance = head_importance(mode, inputs, ctx, &mut comparisons)?;
    let h = attention_forward(mode, inputs, ctx, Some(&importance))?;
    Ok((h, importance))
}

/// Importance tables collected over every layer and head of a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImportanceTable {
    pub entries: Vec<(usize, usize, HeadImportance)>,
}

impl ImportanceTable {
    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadImportance> {
        self.entries
            .iter()
            .find(|(l, h, _)| *l == layer && *h == head)
            .map(|(_, _, imp)| imp)
    }

    /// Tab-separated rows `layer head group doc score block`, where `block`
    /// is the document's position block index (0 = right after the prefix).
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\thead\tgroup\tdoc\tscore\tblock\n");
        for (layer, head, imp) in &self.entries {
            for g in imp.groups() {
                for s in &g.scores {
                    let block = g.order.iter().position(|&d| d == s.doc).unwrap_or(usize::MAX);
                    let _ = writeln!(
                        out,
                        "{layer}\t{head}\t{}\t{}\t{:.8}\t{block}",
                        g.group.label(),
                        s.doc,
                        s.score
                    );
                }
            }
        }
        out
    }
}
