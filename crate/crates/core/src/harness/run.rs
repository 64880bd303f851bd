use serde::Serialize;
use serde_json::json;

use super::{harness_tokenizer, model_inputs, RunReport, Timings};
use crate::error::Result;
use crate::model::{GenerationParams, Model};
use crate::modes::AttentionMode;
use crate::prompt::SegmentedPrompt;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub text: String,
    pub tokens: Vec<u32>,
    pub report: RunReport,
}

/// Greedy generation from one prompt in one mode.
pub fn cmd_run(
    model: &Model,
    prompt: &SegmentedPrompt,
    mode: AttentionMode,
    max_new_tokens: usize,
) -> Result<RunOutcome> {
    let tokenizer = harness_tokenizer();
    let mut timings = Timings::default();
    let (tokens, layout) = timings.time("tokenize", || tokenizer.tokenize(prompt));
    let params = GenerationParams {
        max_new_tokens,
        eos_token: Some(crate::prompt::EOS),
        mode,
    };
    let generation = timings.time("generate", || model.generate_full(&tokens, &layout, params))?;
    let text = tokenizer.detokenize(&generation.tokens);
    let inputs = json!({
        "command": "run",
        "model": model_inputs(model),
        "prompt": prompt,
        "mode": mode.to_string(),
        "max_new_tokens": max_new_tokens,
    });
    let results = json!({
        "mode": mode.to_string(),
        "prompt_tokens": tokens.len(),
        "documents": layout.k(),
        "tokens": generation.tokens,
        "text": text,
        "comparisons": generation.comparisons,
    });
    Ok(RunOutcome {
        report: RunReport::new("run", &inputs, results, timings),
        text,
        tokens: generation.tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: String,
    pub text: String,
    pub tokens: Vec<u32>,
    /// Largest prompt-logit difference from vanilla on the same prompt.
    pub max_abs_logit_diff_vs_vanilla: f32,
}

/// Runs the same prompt under several modes side by side.
pub fn cmd_compare(
    model: &Model,
    prompt: &SegmentedPrompt,
    modes: &[AttentionMode],
    max_new_tokens: usize,
) -> Result<(Vec<CompareRow>, RunReport)> {
    let tokenizer = harness_tokenizer();
    let mut timings = Timings::default();
    let (tokens, layout) = tokenizer.tokenize(prompt);
    let (_, vanilla) = timings.time("vanilla_prefill", || {
        model.prefill(&tokens, &layout, AttentionMode::VANILLA)
    })?;
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let params = GenerationParams {
            max_new_tokens,
            eos_token: Some(crate::prompt::EOS),
            mode,
        };
        let g = timings.time(&mode.to_string(), || model.generate_full(&tokens, &layout, params))?;
        let diff = g
            .prompt_logits
            .iter()
            .zip(&vanilla)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        rows.push(CompareRow {
            mode: mode.to_string(),
            text: tokenizer.detokenize(&g.tokens),
            tokens: g.tokens,
            max_abs_logit_diff_vs_vanilla: diff,
        });
    }
    let inputs = json!({
        "command": "compare",
        "model": model_inputs(model),
        "prompt": prompt,
        "modes": modes.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "max_new_tokens": max_new_tokens,
    });
    let report = RunReport::new("compare", &inputs, json!({ "rows": rows }), timings);
    Ok((rows, report))
}
