//! Brute-force checks of document-order invariance: permutation
//! enumeration, cross-order divergence, a float64 reference forward pass
//! and a majority vote over generated answers.

mod reference;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::Serialize;

pub use reference::{dense_reference, reference_head_attention, MAX_REFERENCE_LEN};

use crate::error::{Error, Result};
use crate::model::{GenerationParams, Model};
use crate::modes::AttentionMode;
use crate::prompt::{SegmentedPrompt, Tokenizer};

/// Logit tolerance for calling two orders equivalent in float32.
pub const LOGIT_TOLERANCE: f32 = 1e-4;

/// Document orders to test. Every permutation when `k! ≤ limit`
/// (lexicographic, identity first); otherwise `limit` distinct orders drawn
/// from a ChaCha8 stream seeded with `seed`, the first being the identity.
pub fn enumerate_orders(k: usize, limit: usize, seed: u64) -> Vec<Vec<usize>> {
    let total = (1..=k).try_fold(1usize, |acc, i| acc.checked_mul(i));
    if total.is_some_and(|t| t <= limit.max(1)) {
        return (0..k).permutations(k).collect();
    }
    let identity: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::from([identity.clone()]);
    let mut orders = vec![identity.clone()];
    while orders.len() < limit {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            orders.push(p);
        }
    }
    orders
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationOutput {
    pub order: Vec<usize>,
    pub tokens: Vec<u32>,
    pub text: String,
    #[serde(skip)]
    pub prompt_logits: Vec<f32>,
}

/// How much one mode's outputs move when documents are reordered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub mode: String,
    pub permutations_tested: usize,
    /// Largest `|Δlogit|` of the final prompt token over all order pairs.
    pub max_abs_logit_diff: f32,
    /// Every order produced the same greedy continuation.
    pub outputs_identical: bool,
    /// Every order produced bitwise-identical prompt logits.
    pub logits_bitwise_identical: bool,
    pub outputs: Vec<PermutationOutput>,
    /// Indices into `outputs` of the most divergent pair.
    pub witness: Option<(usize, usize)>,
}

impl DivergenceReport {
    /// Outputs match and logits agree within [`LOGIT_TOLERANCE`].
    pub fn is_invariant(&self) -> bool {
        self.outputs_identical && self.max_abs_logit_diff <= LOGIT_TOLERANCE
    }

    /// Some pair of orders differs in output or beyond tolerance.
    pub fn has_witness(&self) -> bool {
        !self.is_invariant()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} orders, max |dlogit| = {:.3e}, outputs {}, logits {}",
            self.mode,
            self.permutations_tested,
            self.max_abs_logit_diff,
            if self.outputs_identical { "identical" } else { "differ" },
            if self.logits_bitwise_identical { "bitwise equal" } else { "not bitwise equal" },
        );
        if let (Some((a, b)), true) = (self.witness, self.has_witness()) {
            let _ = write!(
                s,
                "; witness {:?} vs {:?}",
                self.outputs[a].order, self.outputs[b].order
            );
        }
        s
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Generates `new_tokens` greedily for every document order and measures
/// how far the outputs drift.
pub fn run_suite(
    model: &Model,
    prompt: &SegmentedPrompt,
    tokenizer: Tokenizer,
    mode: AttentionMode,
    orders: &[Vec<usize>],
    new_tokens: usize,
) -> Result<DivergenceReport> {
    if prompt.k() < 2 {
        return Err(Error::InvalidArgument(format!(
            "an invariance suite needs at least 2 documents, got {}",
            prompt.k()
        )));
    }
    if orders.is_empty() {
        return Err(Error::InvalidArgument("no document orders to test".into()));
    }
    let params = GenerationParams {
        max_new_tokens: new_tokens,
        eos_token: None,
        mode,
    };
    let outputs = orders
        .par_iter()
        .map(|order| {
            let permuted = prompt.permute_documents(order)?;
            let (tokens, layout) = tokenizer.tokenize(&permuted);
            let generation = model.generate_full(&tokens, &layout, params)?;
            Ok(PermutationOutput {
                order: order.clone(),
                text: tokenizer.detokenize(&generation.tokens),
                tokens: generation.tokens,
                prompt_logits: generation.prompt_logits,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut max_diff = 0.0f32;
    let mut witness = None;
    let mut bitwise = true;
    for (i, j) in (0..outputs.len()).tuple_combinations() {
        let (a, b) = (&outputs[i], &outputs[j]);
        let d = max_abs_diff(&a.prompt_logits, &b.prompt_logits);
        bitwise &= a.prompt_logits == b.prompt_logits;
        if d > max_diff || (witness.is_none() && a.tokens != b.tokens) {
            max_diff = max_diff.max(d);
            witness = Some((i, j));
        }
    }
    let outputs_identical = outputs.iter().map(|o| &o.tokens).all_equal();
    Ok(DivergenceReport {
        mode: mode.to_string(),
        permutations_tested: outputs.len(),
        max_abs_logit_diff: max_diff,
        outputs_identical,
        logits_bitwise_identical: bitwise,
        outputs,
        witness,
    })
}

/// Majority answer across `outputs`. Each output contributes the first
/// match of `pattern` (its first capture group when present); outputs
/// without a match abstain. Ties go to the lexicographically smallest.
pub fn permutation_vote(outputs: &[String], pattern: &str) -> Result<String> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("nothing to vote on".into()));
    }
    let re = Regex::new(pattern)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for out in outputs {
        if let Some(caps) = re.captures(out) {
            let m = caps.get(1).or_else(|| caps.get(0)).expect("whole match");
            *counts.entry(m.as_str().to_string()).or_default() += 1;
        }
    }
    // BTreeMap iterates in ascending key order and max_by_key keeps the
    // last maximum, so scan in reverse to keep the smallest key on ties.
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(answer, _)| answer)
        .ok_or(Error::NoAnswer)
}
