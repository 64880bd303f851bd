use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of randomly initialized projection weights.
pub const INIT_STD: f32 = 0.02;

/// Projections are stored `[in, out]`, so a layer computes `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attention_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `[d_model, vocab]`; `None` when tied to the embedding.
    pub lm_head: Option<Tensor>,
}

/// Kind of a named tensor, used to pick its initializer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TensorRole {
    Gain,
    Matrix,
}

/// Every tensor name with its expected shape, in container order.
pub(crate) fn tensor_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>, TensorRole)> {
    use TensorRole::*;
    let ModelConfig {
        d_model,
        d_ff,
        vocab_size,
        ..
    } = *config;
    let mut schema = vec![(
        "token_embedding.weight".to_string(),
        vec![vocab_size, d_model],
        Matrix,
    )];
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        schema.extend([
            (format!("{p}.attention_norm.weight"), vec![d_model], Gain),
            (format!("{p}.attention.wq.weight"), vec![d_model, config.q_width()], Matrix),
            (format!("{p}.attention.wk.weight"), vec![d_model, config.kv_width()], Matrix),
            (format!("{p}.attention.wv.weight"), vec![d_model, config.kv_width()], Matrix),
            (format!("{p}.attention.wo.weight"), vec![config.q_width(), d_model], Matrix),
            (format!("{p}.ffn_norm.weight"), vec![d_model], Gain),
            (format!("{p}.ffn.w_gate.weight"), vec![d_model, d_ff], Matrix),
            (format!("{p}.ffn.w_up.weight"), vec![d_model, d_ff], Matrix),
            (format!("{p}.ffn.w_down.weight"), vec![d_ff, d_model], Matrix),
        ]);
    }
    schema.push(("final_norm.weight".to_string(), vec![d_model], Gain));
    if !config.tie_embeddings {
        schema.push(("lm_head.weight".to_string(), vec![d_model, vocab_size], Matrix));
    }
    schema
}

impl Weights {
    /// Assembles weights from tensors listed in [`tensor_schema`] order.
    pub(crate) fn from_named(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str, &[usize]) -> Result<Tensor>,
    ) -> Result<Self> {
        let d_model = config.d_model;
        let mut get = |name: String, shape: Vec<usize>| -> Result<Tensor> {
            let t = lookup(&name, &shape)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFiniteWeights(name));
            }
            Ok(t)
        };
        let token_embedding = get(
            "token_embedding.weight".into(),
            vec![config.vocab_size, d_model],
        )?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                attention_norm: get(format!("{p}.attention_norm.weight"), vec![d_model])?,
                wq: get(format!("{p}.attention.wq.weight"), vec![d_model, config.q_width()])?,
                wk: get(format!("{p}.attention.wk.weight"), vec![d_model, config.kv_width()])?,
                wv: get(format!("{p}.attention.wv.weight"), vec![d_model, config.kv_width()])?,
                wo: get(format!("{p}.attention.wo.weight"), vec![config.q_width(), d_model])?,
                ffn_norm: get(format!("{p}.ffn_norm.weight"), vec![d_model])?,
                w_gate: get(format!("{p}.ffn.w_gate.weight"), vec![d_model, config.d_ff])?,
                w_up: get(format!("{p}.ffn.w_up.weight"), vec![d_model, config.d_ff])?,
                w_down: get(format!("{p}.ffn.w_down.weight"), vec![config.d_ff, d_model])?,
            });
        }
        let final_norm = get("final_norm.weight".into(), vec![d_model])?;
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(get(
                "lm_head.weight".into(),
                vec![d_model, config.vocab_size],
            )?)
        };
        Ok(Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Tensors paired with their container names, in schema order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding.weight".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.extend([
                (format!("{p}.attention_norm.weight"), &l.attention_norm),
                (format!("{p}.attention.wq.weight"), &l.wq),
                (format!("{p}.attention.wk.weight"), &l.wk),
                (format!("{p}.attention.wv.weight"), &l.wv),
                (format!("{p}.attention.wo.weight"), &l.wo),
                (format!("{p}.ffn_norm.weight"), &l.ffn_norm),
                (format!("{p}.ffn.w_gate.weight"), &l.w_gate),
                (format!("{p}.ffn.w_up.weight"), &l.w_up),
                (format!("{p}.ffn.w_down.weight"), &l.w_down),
            ]);
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head.weight".to_string(), head));
        }
        out
    }

    /// SHA-256 over tensor names, shapes and little-endian payloads.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Seeded random weights: every matrix is drawn from `N(0, 0.02²)` with a
/// ChaCha8 stream seeded by `seed`, in [`tensor_schema`] order; norm gains
/// are ones.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let mut tensors = std::collections::HashMap::new();
    for (name, shape, role) in tensor_schema(config) {
        let len = shape.iter().product();
        let data = match role {
            TensorRole::Gain => vec![1.0; len],
            TensorRole::Matrix => (0..len).map(|_| normal.sample(&mut rng)).collect(),
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Weights::from_named(config, |name, _| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_deterministic() {
        let config = ModelConfig::tiny();
        let a = init_random(&config, 7).unwrap();
        let b = init_random(&config, 7).unwrap();
        let c = init_random(&config, 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_statistics_match_the_initializer() {
        let w = init_random(&ModelConfig::tiny(), 7).unwrap();
        let data = w.token_embedding.data();
        assert!(data.len() >= 10_000);
        let n = data.len() as f64;
        let mean = data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1 * 0.02, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.1 * 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn tied_models_have_no_head() {
        let mut config = ModelConfig::tiny();
        config.tie_embeddings = true;
        let w = init_random(&config, 1).unwrap();
        assert!(w.lm_head.is_none());
        assert!(w.named_tensors().iter().all(|(n, _)| n != "lm_head.weight"));
    }
}
