use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::{harness_tokenizer, model_inputs, RunReport, Timings};
use crate::error::{Error, Result};
use crate::model::{GenerationParams, Model};
use crate::modes::{AttentionMode, Variant};
use crate::prompt::{SegmentedPrompt, SequenceLayout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub median_seconds: f64,
    /// Median wall time divided by vanilla's on the same prompt.
    pub ratio_vs_vanilla: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparatorRow {
    pub k: usize,
    pub doc_len: usize,
    /// Comparator invocations for one decoded token, all layers and heads.
    pub comparisons_per_token: u64,
    /// `comparisons_per_token / (layers · heads · k · log₂ k)`.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    pub comparators: Vec<ComparatorRow>,
    pub report: RunReport,
}

/// Document counts used for the comparator curve.
pub const COMPARATOR_KS: [usize; 5] = [2, 4, 8, 16, 32];
/// Document tokens shared out among the `k` documents of the curve.
pub const COMPARATOR_DOC_TOKENS: usize = 64;

/// Comparator invocations spent by one PINE decode step for each `k`,
/// holding the sequence length fixed by splitting `doc_tokens` evenly.
pub fn comparator_counts(model: &Model, ks: &[usize], doc_tokens: usize) -> Result<Vec<ComparatorRow>> {
    let c = model.config();
    let mode = AttentionMode::new(Variant::Pine);
    ks.iter()
        .map(|&k| {
            if k == 0 || !doc_tokens.is_multiple_of(k) {
                return Err(Error::InvalidArgument(format!(
                    "{doc_tokens} document tokens do not split into {k} documents"
                )));
            }
            let doc_len = doc_tokens / k;
            let layout = SequenceLayout::from_lengths(4, &vec![doc_len; k], 4)?;
            let tokens: Vec<u32> = (0..layout.n() as u32)
                .map(|i| (i * 37 + 11) % 256)
                .collect();
            let (mut cache, _) = model.prefill(&tokens, &layout, mode)?;
            let before = cache.comparisons;
            model.decode_step(&mut cache, 10, mode)?;
            let per_token = cache.comparisons - before;
            let k_log_k = k as f64 * (k as f64).log2();
            Ok(ComparatorRow {
                k,
                doc_len,
                comparisons_per_token: per_token,
                normalized: per_token as f64 / ((c.n_layers * c.n_heads) as f64 * k_log_k),
            })
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median generation wall time per mode, the ratio to vanilla, and the
/// comparator curve. Timings are informational only.
pub fn cmd_bench(
    model: &Model,
    prompt: &SegmentedPrompt,
    modes: &[AttentionMode],
    repeats: usize,
    max_new_tokens: usize,
) -> Result<BenchOutcome> {
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!(
            "bench needs at least 3 repeats, got {repeats}"
        )));
    }
    let mut timings = Timings::default();
    let (tokens, layout) = harness_tokenizer().tokenize(prompt);
    let time_mode = |mode: AttentionMode| -> Result<f64> {
        let params = GenerationParams {
            max_new_tokens,
            eos_token: None,
            mode,
        };
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            model.generate(&tokens, &layout, params)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        Ok(median(samples))
    };
    let vanilla = timings.time("vanilla", || time_mode(AttentionMode::VANILLA))?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let median_seconds = if mode == AttentionMode::VANILLA {
            vanilla
        } else {
            timings.time(&mode.to_string(), || time_mode(mode))?
        };
        rows.push(BenchRow {
            mode: mode.to_string(),
            median_seconds,
            ratio_vs_vanilla: median_seconds / vanilla,
        });
    }
    let comparators = timings.time("comparators", || {
        comparator_counts(model, &COMPARATOR_KS, COMPARATOR_DOC_TOKENS)
    })?;
    let inputs = json!({
        "command": "bench",
        "model": model_inputs(model),
        "prompt": prompt,
        "modes": modes.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "repeats": repeats,
        "max_new_tokens": max_new_tokens,
    });
    let results = json!({ "rows": rows, "comparators": comparators });
    Ok(BenchOutcome {
        report: RunReport::new("bench", &inputs, results, timings),
        rows,
        comparators,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
