use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{KvCache, ModelConfig, Rope, Weights};
use crate::error::{Error, Result};
use crate::modes::{attention_forward, AttentionContext, AttentionMode, HeadInputs};
use crate::pine::{pine_attention, HeadImportance, ImportanceTable};
use crate::prompt::SequenceLayout;
use crate::tensor::{add_assign, matmul, rms_norm, rms_norm_row, swiglu, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub eos_token: Option<u32>,
    pub mode: AttentionMode,
}

/// Greedy continuation plus the logits that chose its first token.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub prompt_logits: Vec<f32>,
    /// Comparator invocations spent ordering documents, prefill included.
    pub comparisons: u64,
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> Option<u32> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i as u32)
}

/// An immutable model ready for inference. Share it across threads freely;
/// each generation stream owns its own [`KvCache`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    rope: Rope,
    /// `[d_model × vocab]` output projection.
    head: Tensor,
    /// Reduce attention keys in assigned-position order (see
    /// [`AttentionContext::canonical`]). On by default.
    pub canonical_reduction: bool,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let rope = Rope::new(config.d_head, config.rope_theta, config.max_seq_len)?;
        let head = match &weights.lm_head {
            Some(h) => h.clone(),
            None => weights.token_embedding.transpose2()?,
        };
        Ok(Self {
            config,
            weights,
            rope,
            head,
            canonical_reduction: true,
        })
    }

    pub fn with_canonical_reduction(mut self, on: bool) -> Self {
        self.canonical_reduction = on;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the whole prompt through the model. Returns the filled cache and
    /// the next-token logits of the last prompt token.
    pub fn prefill(
        &self,
        tokens: &[u32],
        layout: &SequenceLayout,
        mode: AttentionMode,
    ) -> Result<(KvCache, Vec<f32>)> {
        let (cache, logits, _) = self.prefill_inner(tokens, layout, mode, false)?;
        Ok((cache, logits))
    }

    /// Like [`Model::prefill`], also returning every importance table
    /// computed on the way (empty outside PINE).
    pub fn prefill_with_trace(
        &self,
        tokens: &[u32],
        layout: &SequenceLayout,
        mode: AttentionMode,
    ) -> Result<(KvCache, Vec<f32>, ImportanceTable)> {
        self.prefill_inner(tokens, layout, mode, true)
    }

    fn prefill_inner(
        &self,
        tokens: &[u32],
        layout: &SequenceLayout,
        mode: AttentionMode,
        trace: bool,
    ) -> Result<(KvCache, Vec<f32>, ImportanceTable)> {
        if tokens.is_empty() {
            return Err(Error::Prompt("cannot prefill an empty sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if layout.n() != tokens.len() {
            return Err(Error::Layout(format!(
                "layout covers {} tokens but {} were given",
                layout.n(),
                tokens.len()
            )));
        }
        self.check_tokens(tokens)?;
        let c = &self.config;
        let mut cache = KvCache::new(
            c.n_layers,
            c.n_kv_heads,
            c.d_head,
            c.max_seq_len,
            tokens,
            layout.clone(),
        );
        let mut table = ImportanceTable::default();
        let logits = self.forward(&mut cache, 0, tokens, mode, trace.then_some(&mut table))?;
        Ok((cache, logits, table))
    }

    /// Feeds one token after the cached sequence and returns its next-token
    /// logits. Under PINE the token orders the documents for itself in
    /// every layer and head.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32, mode: AttentionMode) -> Result<Vec<f32>> {
        if cache.is_empty() {
            return Err(Error::EmptyCache);
        }
        self.check_tokens(&[token])?;
        let start = cache.n_cached();
        cache.push_token(token)?;
        self.forward(cache, start, &[token], mode, None)
    }

    pub fn generate(&self, tokens: &[u32], layout: &SequenceLayout, params: GenerationParams) -> Result<Vec<u32>> {
        Ok(self.generate_full(tokens, layout, params)?.tokens)
    }

    /// Greedy decoding loop; stops after `max_new_tokens` or right after
    /// emitting `eos_token`.
    pub fn generate_full(
        &self,
        tokens: &[u32],
        layout: &SequenceLayout,
        params: GenerationParams,
    ) -> Result<Generation> {
        let (mut cache, prompt_logits) = self.prefill(tokens, layout, params.mode)?;
        let mut logits = prompt_logits.clone();
        let mut out = Vec::with_capacity(params.max_new_tokens);
        while out.len() < params.max_new_tokens {
            let next = argmax(&logits).ok_or(Error::NonFinite("logits"))?;
            out.push(next);
            if Some(next) == params.eos_token || out.len() == params.max_new_tokens {
                break;
            }
            logits = self.decode_step(&mut cache, next, params.mode)?;
        }
        Ok(Generation {
            tokens: out,
            prompt_logits,
            comparisons: cache.comparisons,
        })
    }

    /// Processes `new_tokens`, which occupy positions `start..` of the
    /// cache's layout, and returns logits for the last of them.
    fn forward(
        &self,
        cache: &mut KvCache,
        start: usize,
        new_tokens: &[u32],
        mode: AttentionMode,
        mut trace: Option<&mut ImportanceTable>,
    ) -> Result<Vec<f32>> {
        let c = &self.config;
        let eps = c.norm_eps as f32;
        let t = new_tokens.len();
        let mut x = Tensor::zeros(vec![t, c.d_model]);
        for (i, &tok) in new_tokens.iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(self.weights.token_embedding.row(tok as usize));
        }
        for (li, lw) in self.weights.layers.iter().enumerate() {
            let xn = rms_norm(&x, &lw.attention_norm, eps)?;
            let q = matmul(&xn, &lw.wq)?;
            let k = matmul(&xn, &lw.wk)?;
            let v = matmul(&xn, &lw.wv)?;
            cache.append(li, &k, &v);

            let heads = self.attention_heads(cache, li, start, &q, mode)?;
            let mut attn = Tensor::zeros(vec![t, c.q_width()]);
            for (h, (out, _)) in heads.iter().enumerate() {
                for i in 0..t {
                    attn.row_mut(i)[h * c.d_head..(h + 1) * c.d_head]
                        .copy_from_slice(&out[i * c.d_head..(i + 1) * c.d_head]);
                }
            }
            for (h, (_, imp)) in heads.into_iter().enumerate() {
                if let Some(imp) = imp {
                    cache.comparisons += imp.comparisons();
                    if let Some(table) = trace.as_deref_mut() {
                        table.entries.push((li, h, imp));
                    }
                }
            }
            add_assign(&mut x, &matmul(&attn, &lw.wo)?)?;

            let xn = rms_norm(&x, &lw.ffn_norm, eps)?;
            let gated = swiglu(&matmul(&xn, &lw.w_gate)?, &matmul(&xn, &lw.w_up)?)?;
            add_assign(&mut x, &matmul(&gated, &lw.w_down)?)?;
        }
        let mut last = vec![0.0; c.d_model];
        rms_norm_row(x.row(t - 1), self.weights.final_norm.data(), eps, &mut last);
        let last = Tensor::new(vec![1, c.d_model], last)?;
        Ok(matmul(&last, &self.head)?.into_data())
    }

    /// Runs every query head of one layer in parallel. Results are
    /// collected in head order, so threading never changes the output.
    fn attention_heads(
        &self,
        cache: &KvCache,
        layer: usize,
        start: usize,
        q: &Tensor,
        mode: AttentionMode,
    ) -> Result<Vec<(Vec<f32>, Option<HeadImportance>)>> {
        let c = &self.config;
        let d = c.d_head;
        let ctx = AttentionContext {
            layout: cache.layout(),
            rope: &self.rope,
            doc_keys: cache.doc_keys(),
            canonical: self.canonical_reduction,
        };
        (0..c.n_heads)
            .into_par_iter()
            .map(|h| {
                let q_head: Vec<f32> = q
                    .rows()
                    .flat_map(|row| row[h * d..(h + 1) * d].iter().copied())
                    .collect();
                let kv = h / c.group_size();
                let inputs = HeadInputs {
                    q_raw: &q_head,
                    query_start: start,
                    k_raw: cache.head_k(layer, kv),
                    v: cache.head_v(layer, kv),
                    d_head: d,
                };
                if mode.variant.needs_importance() {
                    let (out, imp) = pine_attention(mode, &inputs, &ctx)?;
                    Ok((out, Some(imp)))
                } else {
                    Ok((attention_forward(mode, &inputs, &ctx, None)?, None))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;
    use crate::modes::Variant;

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig::tiny();
        let weights = init_random(&config, seed).unwrap();
        Model::new(config, weights).unwrap()
    }

    fn prompt(seed: u32, prefix: usize, docs: &[usize], suffix: usize) -> (Vec<u32>, SequenceLayout) {
        let layout = SequenceLayout::from_lengths(prefix, docs, suffix).unwrap();
        let tokens = (0..layout.n() as u32)
            .map(|i| (i.wrapping_mul(2_654_435_761).wrapping_add(seed * 97)) % 256)
            .collect();
        (tokens, layout)
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(argmax(&[-1.0]), Some(0));
    }

    #[test]
    fn one_token_prompt_matches_vanilla_in_every_mode() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(1, 1, &[], 0);
        let (_, vanilla) = model.prefill(&tokens, &layout, AttentionMode::VANILLA).unwrap();
        for v in Variant::ALL {
            let (_, logits) = model.prefill(&tokens, &layout, v.into()).unwrap();
            assert_eq!(logits, vanilla, "{v}");
        }
    }

    #[test]
    fn no_documents_pine_equals_vanilla() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(2, 4, &[], 3);
        let (_, vanilla) = model.prefill(&tokens, &layout, AttentionMode::VANILLA).unwrap();
        let (_, pine) = model.prefill(&tokens, &layout, Variant::Pine.into()).unwrap();
        assert_eq!(pine, vanilla);
    }

    #[test]
    fn cache_holds_every_prompt_token() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(3, 2, &[2, 3], 2);
        let (mut cache, _) = model.prefill(&tokens, &layout, Variant::Pine.into()).unwrap();
        assert_eq!(cache.n_cached(), tokens.len());
        assert_eq!(cache.k_raw(1).shape(), &[tokens.len(), 2, 16]);
        model.decode_step(&mut cache, 5, Variant::Pine.into()).unwrap();
        assert_eq!(cache.n_cached(), tokens.len() + 1);
        assert_eq!(cache.layout().suffix_len(), 3);
    }

    #[test]
    fn decode_matches_monolithic_prefill() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(4, 3, &[2, 3, 2], 2);
        for v in Variant::ALL {
            let mode = AttentionMode::new(v);
            let (mut cache, _) = model.prefill(&tokens, &layout, mode).unwrap();
            let step = model.decode_step(&mut cache, 42, mode).unwrap();
            let mut full = tokens.clone();
            full.push(42);
            let mut longer = layout.clone();
            longer.extend(1);
            let (_, mono) = model.prefill(&full, &longer, mode).unwrap();
            let diff = step.iter().zip(&mono).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-4, "{v}: {diff}");
        }
    }

    #[test]
    fn identical_caches_decode_identically() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(5, 2, &[3, 3], 1);
        let (cache, _) = model.prefill(&tokens, &layout, Variant::Pine.into()).unwrap();
        let mut a = cache.clone();
        let mut b = cache;
        let la = model.decode_step(&mut a, 9, Variant::Pine.into()).unwrap();
        let lb = model.decode_step(&mut b, 9, Variant::Pine.into()).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn generation_budget_and_eos() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(6, 2, &[2, 2], 2);
        let mut params = GenerationParams {
            max_new_tokens: 0,
            eos_token: None,
            mode: Variant::Pine.into(),
        };
        assert!(model.generate(&tokens, &layout, params).unwrap().is_empty());

        params.max_new_tokens = 5;
        let first = model.generate(&tokens, &layout, params).unwrap();
        assert_eq!(first.len(), 5);
        for _ in 0..2 {
            assert_eq!(model.generate(&tokens, &layout, params).unwrap(), first);
        }
        params.eos_token = Some(first[0]);
        assert_eq!(model.generate(&tokens, &layout, params).unwrap(), vec![first[0]]);
    }

    #[test]
    fn input_errors() {
        let model = tiny_model(7);
        let (tokens, layout) = prompt(1, 2, &[2], 1);
        let long = SequenceLayout::from_lengths(300, &[], 0).unwrap();
        assert!(matches!(
            model.prefill(&vec![1; 300], &long, AttentionMode::VANILLA),
            Err(Error::SequenceTooLong { len: 300, max: 256 })
        ));
        let mut bad = tokens.clone();
        bad[0] = 999;
        assert!(matches!(
            model.prefill(&bad, &layout, AttentionMode::VANILLA),
            Err(Error::TokenOutOfRange { token: 999, .. })
        ));
        assert!(matches!(
            model.prefill(&tokens[..3], &layout, AttentionMode::VANILLA),
            Err(Error::Layout(_))
        ));

        let (full, full_layout) = prompt(1, 256, &[], 0);
        let (mut cache, _) = model.prefill(&full, &full_layout, AttentionMode::VANILLA).unwrap();
        assert!(matches!(
            model.decode_step(&mut cache, 1, AttentionMode::VANILLA),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
