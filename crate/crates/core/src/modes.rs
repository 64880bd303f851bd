//! Visibility masks, key/query position assignment and the attention kernel
//! shared by every mode.
//!
//! | mode              | inter-document mask | key positions                 |
//! |-------------------|---------------------|-------------------------------|
//! | `vanilla`         | causal              | input positions               |
//! | `nia`             | removed             | input positions               |
//! | `pcw`             | removed             | documents share one block     |
//! | `sp`              | removed             | as `pcw`, plus 1/k doc mass   |
//! | `pine`            | bidirectional       | sorted by importance, closest |
//! | `pine_noreassign` | bidirectional       | input positions               |
//! | `pine_reverse`    | bidirectional       | sorted, most important first  |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Rope;
use crate::pine::{pine_key_positions, DocumentKeys, HeadImportance};
use crate::prompt::{Region, SequenceLayout};
use crate::tensor::{dot, softmax_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Nia,
    Pcw,
    Sp,
    Pine,
    PineNoReassign,
    PineReverse,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Vanilla,
        Variant::Nia,
        Variant::Pcw,
        Variant::Sp,
        Variant::Pine,
        Variant::PineNoReassign,
        Variant::PineReverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Nia => "nia",
            Variant::Pcw => "pcw",
            Variant::Sp => "sp",
            Variant::Pine => "pine",
            Variant::PineNoReassign => "pine_noreassign",
            Variant::PineReverse => "pine_reverse",
        }
    }

    /// Bidirectional inter-document mask.
    pub fn is_pine_family(self) -> bool {
        matches!(
            self,
            Variant::Pine | Variant::PineNoReassign | Variant::PineReverse
        )
    }

    /// Re-assigns key positions from an importance table.
    pub fn needs_importance(self) -> bool {
        matches!(self, Variant::Pine | Variant::PineReverse)
    }

    /// Whether outputs are independent of document order by construction.
    pub fn expected_invariant(self) -> bool {
        matches!(
            self,
            Variant::Pcw | Variant::Sp | Variant::Pine | Variant::PineReverse
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

/// How token-level importance is pooled into a document score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum over the block divided by the document length.
    #[default]
    Mean,
    Sum,
    Max,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::InvalidArgument(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// An attention variant plus its importance aggregation (ignored outside
/// the PINE family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionMode {
    pub variant: Variant,
    pub aggregation: Aggregation,
}

impl AttentionMode {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn with_aggregation(self, aggregation: Aggregation) -> Self {
        Self {
            aggregation,
            ..self
        }
    }

    pub const VANILLA: AttentionMode = AttentionMode {
        variant: Variant::Vanilla,
        aggregation: Aggregation::Mean,
    };
}

impl From<Variant> for AttentionMode {
    fn from(v: Variant) -> Self {
        Self::new(v)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant.needs_importance() && self.aggregation != Aggregation::Mean {
            write!(f, "{}({})", self.variant, self.aggregation.name())
        } else {
            write!(f, "{}", self.variant)
        }
    }
}

/// Whether query token `q` may attend to key token `k`.
pub fn visible(variant: Variant, layout: &SequenceLayout, q: usize, k: usize) -> bool {
    let cross_doc = match (layout.region(q), layout.region(k)) {
        (Region::Document(a), Region::Document(b)) => a != b,
        _ => false,
    };
    match variant {
        Variant::Vanilla => k <= q,
        Variant::Nia | Variant::Pcw | Variant::Sp => k <= q && !cross_doc,
        Variant::Pine | Variant::PineNoReassign | Variant::PineReverse => k <= q || cross_doc,
    }
}

/// Boolean visibility matrix for a whole layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    n: usize,
    bits: Vec<bool>,
}

impl MaskSpec {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n..(q + 1) * self.n]
    }

    /// Builds a mask from rows of `0`/`1`.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("mask rows must form a square".into()));
        }
        let bits = rows.iter().flat_map(|r| r.iter().map(|&b| b != 0)).collect();
        Ok(Self { n, bits })
    }

    /// One line per query, space-separated `0`/`1` per key.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 2);
        for q in 0..self.n {
            let line: Vec<&str> = self
                .row(q)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn build_mask(mode: AttentionMode, layout: &SequenceLayout) -> MaskSpec {
    let n = layout.n();
    let mut bits = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            bits.push(visible(mode.variant, layout, q, k));
        }
    }
    MaskSpec { n, bits }
}

/// Positions seen by one query: its own and those of its visible keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PositionMap {
    pub query_position: usize,
    /// `(key token, position)` for every visible key, by token index.
    pub keys: Vec<(usize, usize)>,
}

impl PositionMap {
    pub fn position_of(&self, token: usize) -> Option<usize> {
        self.keys
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.keys[i].1)
    }
}

/// Shared-block position used by PCW and SP: every document starts at the
/// end of the prefix and the suffix continues after the longest document.
pub fn pcw_position(layout: &SequenceLayout, token: usize) -> usize {
    match layout.region(token) {
        Region::Prefix => token,
        Region::Document(d) => layout.prefix_len() + token - layout.doc_span(d).start,
        Region::Suffix => {
            layout.prefix_len() + layout.max_doc_len() + token - layout.suffix_start()
        }
    }
}

pub fn assign_positions(
    mode: AttentionMode,
    layout: &SequenceLayout,
    q: usize,
    importance: Option<&HeadImportance>,
) -> Result<PositionMap> {
    let variant = mode.variant;
    let visible_keys = (0..layout.n()).filter(|&k| visible(variant, layout, q, k));
    match variant {
        Variant::Vanilla | Variant::Nia | Variant::PineNoReassign => Ok(PositionMap {
            query_position: q,
            keys: visible_keys.map(|k| (k, k)).collect(),
        }),
        Variant::Pcw | Variant::Sp => Ok(PositionMap {
            query_position: pcw_position(layout, q),
            keys: visible_keys.map(|k| (k, pcw_position(layout, k))).collect(),
        }),
        Variant::Pine | Variant::PineReverse => {
            let positions = match layout.region(q) {
                Region::Prefix => None,
                region => {
                    let table = importance
                        .ok_or_else(|| Error::MissingImportance(variant.to_string()))?;
                    let group = match region {
                        Region::Document(d) => table.doc_group(d),
                        _ => table.token_group(q),
                    }
                    .ok_or_else(|| {
                        Error::MissingImportance(format!("{variant} query token {q}"))
                    })?;
                    Some(pine_key_positions(layout, &group.order, &group.group))
                }
            };
            Ok(match positions {
                None => PositionMap {
                    query_position: q,
                    keys: visible_keys.map(|k| (k, k)).collect(),
                },
                Some(p) => PositionMap {
                    query_position: p[q],
                    keys: visible_keys.map(|k| (k, p[k])).collect(),
                },
            })
        }
    }
}

/// Multiplies the document entries of `weights` by `1/k` and renormalizes,
/// summing in slice order. With `k ≤ 1` the row is returned untouched.
pub(crate) fn sp_rescale_in_place(weights: &mut [f32], is_doc: impl Fn(usize) -> bool, k: usize) {
    if k <= 1 {
        return;
    }
    let factor = 1.0 / k as f32;
    let mut sum = 0.0f32;
    for (i, w) in weights.iter_mut().enumerate() {
        if is_doc(i) {
            *w *= factor;
        }
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
}

/// Structured-prompting rescale of one post-softmax attention row, where
/// `weights[j]` is the weight on key token `j`. Only suffix queries are
/// affected.
pub fn sp_rescale(weights: &[f32], layout: &SequenceLayout, q_index: usize) -> Vec<f32> {
    let mut out = weights.to_vec();
    if q_index >= layout.suffix_start() {
        sp_rescale_in_place(
            &mut out,
            |j| matches!(layout.region(j), Region::Document(_)),
            layout.k(),
        );
    }
    out
}

/// Raw (un-rotated) per-head tensors for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct HeadInputs<'a> {
    /// `[t × d_head]` queries for tokens `query_start..query_start + t`.
    pub q_raw: &'a [f32],
    pub query_start: usize,
    /// `[n × d_head]` keys for every token of the layout.
    pub k_raw: &'a [f32],
    /// `[n × d_head]` values.
    pub v: &'a [f32],
    pub d_head: usize,
}

impl HeadInputs<'_> {
    pub fn n_queries(&self) -> usize {
        self.q_raw.len() / self.d_head
    }

    pub fn n_keys(&self) -> usize {
        self.k_raw.len() / self.d_head
    }

    pub fn query_row(&self, i: usize) -> &[f32] {
        &self.q_raw[i * self.d_head..(i + 1) * self.d_head]
    }

    pub fn key_row(&self, t: usize) -> &[f32] {
        &self.k_raw[t * self.d_head..(t + 1) * self.d_head]
    }

    pub fn value_row(&self, t: usize) -> &[f32] {
        &self.v[t * self.d_head..(t + 1) * self.d_head]
    }

    fn validate(&self, layout: &SequenceLayout) -> Result<()> {
        let d = self.d_head;
        if d == 0
            || !self.q_raw.len().is_multiple_of(d)
            || self.k_raw.len() != layout.n() * d
            || self.v.len() != layout.n() * d
            || self.query_start + self.n_queries() > layout.n()
        {
            return Err(Error::Shape(format!(
                "attention inputs do not match a layout of {} tokens",
                layout.n()
            )));
        }
        Ok(())
    }
}

/// Everything besides the tensors that the attention kernel needs.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext<'a> {
    pub layout: &'a SequenceLayout,
    pub rope: &'a Rope,
    pub doc_keys: &'a DocumentKeys,
    /// Reduce over keys in ascending assigned position (ties between
    /// documents broken by content), rather than by storage index.
    pub canonical: bool,
}

impl AttentionContext<'_> {
    fn reduction_key(&self, token: usize, position: usize) -> (usize, usize, usize) {
        let rank = match self.layout.region(token) {
            Region::Document(d) => self.doc_keys.canonical_rank(d),
            _ => 0,
        };
        (position, rank, token)
    }
}

/// One head of attention for every query row in `inputs`.
///
/// Each query rotates itself and its visible keys to the positions chosen
/// by `mode`, takes a scaled dot-product softmax, applies the SP rescale
/// when relevant and sums values. Returns `[t × d_head]`.
pub fn attention_forward(
    mode: AttentionMode,
    inputs: &HeadInputs<'_>,
    ctx: &AttentionContext<'_>,
    importance: Option<&HeadImportance>,
) -> Result<Vec<f32>> {
    inputs.validate(ctx.layout)?;
    if mode.variant.needs_importance() && importance.is_none() {
        return Err(Error::MissingImportance(mode.variant.to_string()));
    }
    let d = inputs.d_head;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; inputs.n_queries() * d];
    let mut q_rot = vec![0.0f32; d];
    let mut k_rot = vec![0.0f32; d];
    for (i, h) in out.chunks_mut(d).enumerate() {
        let q = inputs.query_start + i;
        let PositionMap {
            query_position,
            mut keys,
        } = assign_positions(mode, ctx.layout, q, importance)?;
        if ctx.canonical {
            keys.sort_by_key(|&(t, p)| ctx.reduction_key(t, p));
        }
        ctx.rope.rotate(inputs.query_row(i), query_position, &mut q_rot);
        let mut weights: Vec<f32> = keys
            .iter()
            .map(|&(t, p)| {
                ctx.rope.rotate(inputs.key_row(t), p, &mut k_rot);
                dot(&q_rot, &k_rot)
            })
            .collect();
        if weights.is_empty() {
            return Err(Error::FullyMaskedRow { row: q });
        }
        softmax_in_place(&mut weights, scale).map_err(|e| match e {
            Error::FullyMaskedRow { .. } => Error::FullyMaskedRow { row: q },
            other => other,
        })?;
        if mode.variant == Variant::Sp && q >= ctx.layout.suffix_start() {
            sp_rescale_in_place(
                &mut weights,
                |j| matches!(ctx.layout.region(keys[j].0), Region::Document(_)),
                ctx.layout.k(),
            );
        }
        for (&w, &(t, _)) in weights.iter().zip(&keys) {
            for (acc, &v) in h.iter_mut().zip(inputs.value_row(t)) {
                *acc += w * v;
            }
        }
    }
    Ok(out)
}
