//! The fast runtime against the float64 reference forward pass.

use pine_core::model::{init_random, save_weights, Model, ModelConfig};
use pine_core::modes::{AttentionMode, Variant};
use pine_core::oracle::{dense_reference, MAX_REFERENCE_LEN};
use pine_core::prompt::{SegmentedPrompt, SequenceLayout, Tokenizer};
use pine_core::Error;

fn tiny(seed: u64) -> Model {
    let config = ModelConfig::tiny();
    Model::new(config.clone(), init_random(&config, seed).unwrap()).unwrap()
}

fn max_diff(fast: &[f32], slow: &[f64]) -> f64 {
    fast.iter().zip(slow).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max)
}

#[test]
fn one_token_prompt_agrees_closely() {
    let model = tiny(7);
    let layout = SequenceLayout::from_lengths(1, &[], 0).unwrap();
    for v in Variant::ALL {
        let (_, fast) = model.prefill(&[72], &layout, v.into()).unwrap();
        let slow = dense_reference(&model, &[72], &layout, v.into()).unwrap();
        assert!(max_diff(&fast, &slow) <= 1e-6, "{v}");
    }
}

#[test]
fn two_token_document_prompt_agrees_for_every_mode() {
    let model = tiny(7);
    let prompt = SegmentedPrompt::new("Q", vec!["ab".into(), "cd".into(), "ef".into()], "?").unwrap();
    let (tokens, layout) = Tokenizer::default().tokenize(&prompt);
    assert_eq!(layout.n(), 8);
    for v in Variant::ALL {
        let (_, fast) = model.prefill(&tokens, &layout, v.into()).unwrap();
        let slow = dense_reference(&model, &tokens, &layout, v.into()).unwrap();
        assert!(max_diff(&fast, &slow) <= 1e-4, "{v}");
    }
}

#[test]
fn larger_weights_still_agree() {
    // Scaled-up weights make attention far from uniform, so a wrong
    // position or ordering would show up in the logits.
    let config = ModelConfig { n_layers: 2, max_seq_len: 64, ..ModelConfig::tiny() };
    let mut weights = init_random(&config, 3).unwrap();
    for l in &mut weights.layers {
        for t in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
            t.data_mut().iter_mut().for_each(|x| *x *= 25.0);
        }
    }
    let model = Model::new(config, weights).unwrap();
    let layout = SequenceLayout::from_lengths(3, &[4, 2, 5, 3], 4).unwrap();
    let tokens: Vec<u32> = (0..layout.n() as u32).map(|i| (i * 41 + 3) % 256).collect();
    for v in Variant::ALL {
        let (_, fast) = model.prefill(&tokens, &layout, v.into()).unwrap();
        let slow = dense_reference(&model, &tokens, &layout, v.into()).unwrap();
        assert!(max_diff(&fast, &slow) <= 1e-4, "{v}: {}", max_diff(&fast, &slow));
    }
}

#[test]
fn reference_refuses_long_sequences() {
    let config = ModelConfig { max_seq_len: 1024, ..ModelConfig::tiny() };
    let model = Model::new(config.clone(), init_random(&config, 1).unwrap()).unwrap();
    let n = MAX_REFERENCE_LEN + 1;
    let layout = SequenceLayout::from_lengths(n, &[], 0).unwrap();
    assert!(matches!(
        dense_reference(&model, &vec![1; n], &layout, AttentionMode::VANILLA),
        Err(Error::OracleTooLarge { .. })
    ));
}

#[test]
fn saved_models_reload_with_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig::tiny();
    let weights = init_random(&config, 7).unwrap();
    let (wp, cp) = (dir.path().join("m.safetensors"), dir.path().join("m.toml"));
    save_weights(&wp, &weights).unwrap();
    config.save(&cp).unwrap();
    let (c2, w2) = pine_core::model::load_weights(&wp, &cp).unwrap();
    let a = Model::new(config, weights).unwrap();
    let b = Model::new(c2, w2).unwrap();
    let layout = SequenceLayout::from_lengths(2, &[3, 3], 2).unwrap();
    let tokens = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    let mode = Variant::Pine.into();
    assert_eq!(a.prefill(&tokens, &layout, mode).unwrap().1, b.prefill(&tokens, &layout, mode).unwrap().1);
}
