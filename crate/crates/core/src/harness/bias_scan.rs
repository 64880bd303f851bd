use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{harness_tokenizer, model_inputs, RunReport, Timings};
use crate::error::{Error, Result};
use crate::model::{GenerationParams, Model};
use crate::modes::AttentionMode;
use crate::prompt::SegmentedPrompt;

/// Largest spread allowed for a mode that should not care where the gold
/// document sits.
pub const FLATNESS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Teacher-forced log-probability of the whole gold continuation.
    #[default]
    GoldTokenLogprob,
    /// 1 when greedy decoding reproduces the gold continuation, else 0.
    ExactMatch,
}

fn default_modes() -> Vec<AttentionMode> {
    vec![AttentionMode::VANILLA, crate::modes::Variant::Pine.into()]
}

/// A needle-in-distractors sweep: the needle document is moved through
/// every requested slot among the distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasScanConfig {
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
    pub needle: String,
    pub distractors: Vec<String>,
    /// Continuation the needle supports.
    pub gold: String,
    /// Needle slots to sweep; all `k` when absent.
    #[serde(default)]
    pub positions: Option<Vec<usize>>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default = "default_modes", with = "mode_names")]
    pub modes: Vec<AttentionMode>,
}

mod mode_names {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::modes::{AttentionMode, Variant};

    pub fn serialize<S: Serializer>(modes: &[AttentionMode], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(modes.iter().map(|m| m.variant.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<AttentionMode>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse::<Variant>().map(AttentionMode::from).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl BiasScanConfig {
    pub fn k(&self) -> usize {
        self.distractors.len() + 1
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Prompt(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn positions(&self) -> Vec<usize> {
        self.positions.clone().unwrap_or_else(|| (0..self.k()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.needle.is_empty() {
            return Err(Error::InvalidArgument("needle must not be empty".into()));
        }
        if self.gold.is_empty() {
            return Err(Error::InvalidArgument("gold continuation must not be empty".into()));
        }
        if let Some(bad) = self.positions().into_iter().find(|&p| p >= self.k()) {
            return Err(Error::InvalidArgument(format!(
                "gold position {bad} is outside 0..{}",
                self.k()
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidArgument("no modes to scan".into()));
        }
        self.prompt_at(0).map(|_| ())
    }

    /// The prompt with the needle in slot `position`.
    pub fn prompt_at(&self, position: usize) -> Result<SegmentedPrompt> {
        let mut documents = self.distractors.clone();
        documents.insert(position, self.needle.clone());
        SegmentedPrompt::new(self.prefix.clone(), documents, self.suffix.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub mode: String,
    pub position: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasScanOutcome {
    pub rows: Vec<BiasRow>,
    /// Tab-separated `mode position metric value`.
    pub table: String,
    /// `(mode, spread)` for every mode expected to be order-invariant whose
    /// values move by more than [`FLATNESS_TOLERANCE`].
    pub flatness_violations: Vec<(String, f64)>,
    pub report: RunReport,
}

fn log_softmax_at(logits: &[f32], token: u32) -> f64 {
    let max = logits.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    logits[token as usize] as f64 - max - z.ln()
}

fn score(model: &Model, prompt: &SegmentedPrompt, gold: &[u32], metric: Metric, mode: AttentionMode) -> Result<f64> {
    let (tokens, layout) = harness_tokenizer().tokenize(prompt);
    match metric {
        Metric::GoldTokenLogprob => {
            let (mut cache, mut logits) = model.prefill(&tokens, &layout, mode)?;
            let mut total = 0.0;
            for (i, &g) in gold.iter().enumerate() {
                total += log_softmax_at(&logits, g);
                if i + 1 < gold.len() {
                    logits = model.decode_step(&mut cache, g, mode)?;
                }
            }
            Ok(total)
        }
        Metric::ExactMatch => {
            let params = GenerationParams {
                max_new_tokens: gold.len(),
                eos_token: None,
                mode,
            };
            let out = model.generate(&tokens, &layout, params)?;
            Ok(if out == gold { 1.0 } else { 0.0 })
        }
    }
}

/// Sweeps the needle through every requested slot under every mode.
/// Only order-invariant modes are checked for flatness; the rest are
/// reported as measured.
pub fn cmd_bias_scan(model: &Model, scan: &BiasScanConfig) -> Result<BiasScanOutcome> {
    scan.validate()?;
    let mut timings = Timings::default();
    let gold = harness_tokenizer().encode(&scan.gold);
    let metric_name = match scan.metric {
        Metric::GoldTokenLogprob => "gold_token_logprob",
        Metric::ExactMatch => "exact_match",
    };
    let mut rows = Vec::new();
    let mut table = String::from("mode\tposition\tmetric\tvalue\n");
    let mut flatness_violations = Vec::new();
    for &mode in &scan.modes {
        let mut values = Vec::new();
        for position in scan.positions() {
            let prompt = scan.prompt_at(position)?;
            let value = timings.time(&mode.to_string(), || score(model, &prompt, &gold, scan.metric, mode))?;
            let _ = writeln!(table, "{mode}\t{position}\t{metric_name}\t{value:.9}");
            rows.push(BiasRow { mode: mode.to_string(), position, value });
            values.push(value);
        }
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        if mode.variant.expected_invariant() && spread > FLATNESS_TOLERANCE {
            flatness_violations.push((mode.to_string(), spread));
        }
    }
    let inputs = json!({
        "command": "bias-scan",
        "model": model_inputs(model),
        "scan": scan,
    });
    let results = json!({
        "metric": metric_name,
        "rows": rows,
        "flatness_violations": flatness_violations,
    });
    Ok(BiasScanOutcome {
        report: RunReport::new("bias-scan", &inputs, results, timings),
        rows,
        table,
        flatness_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scan_config() {
        let cfg = BiasScanConfig::from_json(
            r#"{"needle":"N","distractors":["a","b"],"gold":"x","modes":["pine","pcw"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.k(), 3);
        assert_eq!(cfg.positions(), vec![0, 1, 2]);
        assert_eq!(cfg.metric, Metric::GoldTokenLogprob);
        assert_eq!(cfg.prompt_at(2).unwrap().documents, vec!["a", "b", "N"]);
        assert!(BiasScanConfig::from_json(r#"{"needle":"","distractors":[],"gold":"x"}"#).is_err());
        assert!(BiasScanConfig::from_json(
            r#"{"needle":"N","distractors":["a"],"gold":"x","positions":[2]}"#
        )
        .is_err());
        assert!(BiasScanConfig::from_json(
            r#"{"needle":"N","distractors":["a"],"gold":"x","modes":["bogus"]}"#
        )
        .is_err());
    }

    #[test]
    fn log_softmax_matches_closed_form() {
        let v = log_softmax_at(&[0.0, 0.0], 1);
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }
}
