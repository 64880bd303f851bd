//! Property tests over random layouts and head tensors.

use proptest::prelude::*;

use pine_core::model::Rope;
use pine_core::modes::{attention_forward, build_mask, AttentionContext, AttentionMode, HeadInputs, Variant};
use pine_core::oracle::reference_head_attention;
use pine_core::pine::{head_importance, pine_attention, pine_key_positions, DocumentKeys, HeadImportance};
use pine_core::prompt::{invert_permutation, SequenceLayout};
use pine_core::tensor::row_softmax;
use pine_core::{Aggregation, Tensor};

const D: usize = 8;

#[derive(Debug, Clone)]
struct Instance {
    layout: SequenceLayout,
    tokens: Vec<u32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn instance(max_docs: usize) -> impl Strategy<Value = Instance> {
    (0usize..4, prop::collection::vec(1usize..5, 0..=max_docs), 0usize..4)
        .prop_filter("non-empty", |(p, d, s)| p + d.iter().sum::<usize>() + s > 0)
        .prop_flat_map(|(prefix, docs, suffix)| {
            let layout = SequenceLayout::from_lengths(prefix, &docs, suffix).unwrap();
            let n = layout.n();
            (
                Just(layout),
                prop::collection::vec(0u32..258, n),
                prop::collection::vec(-1.5f32..1.5, n * D),
                prop::collection::vec(-1.5f32..1.5, n * D),
                prop::collection::vec(-1.5f32..1.5, n * D),
            )
        })
        .prop_map(|(layout, tokens, q, k, v)| Instance { layout, tokens, q, k, v })
}

/// Reorders documents so `new doc i = old doc perm[i]`; returns the new
/// instance and, for every old token index, its new index.
fn permute(inst: &Instance, perm: &[usize]) -> (Instance, Vec<usize>) {
    let l = &inst.layout;
    let lens: Vec<usize> = perm.iter().map(|&d| l.doc_len(d)).collect();
    let layout = SequenceLayout::from_lengths(l.prefix_len(), &lens, l.suffix_len()).unwrap();
    let mut new_of_old = vec![0; l.n()];
    for t in l.prefix_span() {
        new_of_old[t] = t;
    }
    for (new_doc, &old_doc) in perm.iter().enumerate() {
        for (off, t) in l.doc_span(old_doc).enumerate() {
            new_of_old[t] = layout.doc_span(new_doc).start + off;
        }
    }
    for t in l.suffix_start()..l.n() {
        new_of_old[t] = t;
    }
    let mut out = Instance {
        layout,
        tokens: vec![0; l.n()],
        q: vec![0.0; l.n() * D],
        k: vec![0.0; l.n() * D],
        v: vec![0.0; l.n() * D],
    };
    for (old, &new) in new_of_old.iter().enumerate() {
        out.tokens[new] = inst.tokens[old];
        for (dst, src) in [(&mut out.q, &inst.q), (&mut out.k, &inst.k), (&mut out.v, &inst.v)] {
            dst[new * D..(new + 1) * D].copy_from_slice(&src[old * D..(old + 1) * D]);
        }
    }
    (out, new_of_old)
}

fn run(inst: &Instance, mode: AttentionMode, canonical: bool) -> (Vec<f32>, Option<HeadImportance>) {
    let rope = Rope::new(D, 10_000.0, 64).unwrap();
    let keys = DocumentKeys::new(&inst.tokens, &inst.layout);
    let ctx = AttentionContext { layout: &inst.layout, rope: &rope, doc_keys: &keys, canonical };
    let inputs = HeadInputs { q_raw: &inst.q, query_start: 0, k_raw: &inst.k, v: &inst.v, d_head: D };
    if mode.variant.needs_importance() {
        let (h, imp) = pine_attention(mode, &inputs, &ctx).unwrap();
        (h, Some(imp))
    } else {
        (attention_forward(mode, &inputs, &ctx, None).unwrap(), None)
    }
}

fn perm_strategy(inst: Instance) -> impl Strategy<Value = (Instance, Vec<usize>)> {
    let k = inst.layout.k();
    (Just(inst), Just((0..k).collect::<Vec<_>>()).prop_shuffle())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn invariant_modes_ignore_document_order((inst, perm) in instance(4).prop_flat_map(perm_strategy)) {
        let (moved, new_of_old) = permute(&inst, &perm);
        for v in [Variant::Pine, Variant::PineReverse, Variant::Pcw, Variant::Sp] {
            for agg in [Aggregation::Mean, Aggregation::Sum, Aggregation::Max] {
                let mode = AttentionMode::new(v).with_aggregation(agg);
                let (a, _) = run(&inst, mode, true);
                let (b, _) = run(&moved, mode, true);
                for (old, &new) in new_of_old.iter().enumerate() {
                    prop_assert_eq!(&a[old * D..(old + 1) * D], &b[new * D..(new + 1) * D], "{} token {}", mode, old);
                }
                let (c, _) = run(&moved, mode, false);
                for (old, &new) in new_of_old.iter().enumerate() {
                    for j in 0..D {
                        prop_assert!((a[old * D + j] - c[new * D + j]).abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn importance_is_independent_of_order((inst, perm) in instance(4).prop_flat_map(perm_strategy)) {
        let (moved, new_of_old) = permute(&inst, &perm);
        let inv = invert_permutation(&perm).unwrap();
        let (_, a) = run(&inst, Variant::Pine.into(), true);
        let (_, b) = run(&moved, Variant::Pine.into(), true);
        let (a, b) = (a.unwrap(), b.unwrap());
        for ga in a.groups() {
            let gb = match ga.group.pinned_doc() {
                Some(d) => b.doc_group(inv[d]),
                None => b.token_group(new_of_old[ga.group.query_tokens.start]),
            }
            .unwrap();
            for s in &ga.scores {
                let moved_score = gb.scores.iter().find(|x| x.doc == inv[s.doc]).unwrap();
                prop_assert_eq!(s.score, moved_score.score);
            }
            let mapped: Vec<usize> = ga.order.iter().map(|&d| inv[d]).collect();
            prop_assert_eq!(&mapped, &gb.order);
        }
    }

    #[test]
    fn query_document_takes_the_last_block(inst in instance(5)) {
        let (_, imp) = run(&inst, Variant::Pine.into(), true);
        let imp = imp.unwrap();
        let l = &inst.layout;
        for g in imp.groups() {
            let pos = pine_key_positions(l, &g.order, &g.group);
            // document positions form one contiguous run after the prefix
            let mut doc_pos: Vec<usize> = (0..l.k()).flat_map(|d| l.doc_span(d)).map(|t| pos[t]).collect();
            doc_pos.sort_unstable();
            prop_assert_eq!(doc_pos, (l.prefix_len()..l.suffix_start()).collect::<Vec<_>>());
            if let Some(d) = g.group.pinned_doc() {
                let own = l.doc_span(d).map(|t| pos[t]).min().unwrap();
                prop_assert_eq!(own, l.suffix_start() - l.doc_len(d));
                prop_assert!(!g.group.candidate_docs.contains(&d));
            }
        }
    }

    #[test]
    fn mean_scores_account_for_every_query_row(inst in instance(5)) {
        let rope = Rope::new(D, 10_000.0, 64).unwrap();
        let keys = DocumentKeys::new(&inst.tokens, &inst.layout);
        let ctx = AttentionContext { layout: &inst.layout, rope: &rope, doc_keys: &keys, canonical: true };
        let inputs = HeadInputs { q_raw: &inst.q, query_start: 0, k_raw: &inst.k, v: &inst.v, d_head: D };
        let imp = head_importance(Variant::Pine.into(), &inputs, &ctx, &mut 0).unwrap();
        for g in imp.groups() {
            if g.scores.is_empty() {
                continue;
            }
            let mass: f32 = g.scores.iter().map(|s| s.score * inst.layout.doc_len(s.doc) as f32).sum();
            prop_assert!((mass - g.group.query_tokens.len() as f32).abs() <= 1e-5);
        }
    }

    #[test]
    fn every_mode_matches_the_float64_reference(inst in instance(4)) {
        let to64 = |x: &[f32]| -> Vec<Vec<f64>> {
            x.chunks(D).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        for v in Variant::ALL {
            let mode = AttentionMode::new(v);
            let (fast, _) = run(&inst, mode, true);
            let slow = reference_head_attention(
                mode, &inst.layout, &inst.tokens, &to64(&inst.q), &to64(&inst.k), &to64(&inst.v), 10_000.0,
            );
            for (t, row) in slow.iter().enumerate() {
                for j in 0..D {
                    prop_assert!((fast[t * D + j] as f64 - row[j]).abs() <= 1e-5, "{} token {}", v, t);
                }
            }
        }
    }

    #[test]
    fn masks_are_reflexive_and_hide_future_suffix(inst in instance(5)) {
        let l = &inst.layout;
        for v in Variant::ALL {
            let m = build_mask(v.into(), l);
            for q in 0..l.n() {
                prop_assert!(m.visible(q, q));
                for k in 0..l.n() {
                    if k > q && (k >= l.suffix_start() || q < l.prefix_len()) {
                        prop_assert!(!m.visible(q, k));
                    }
                }
            }
            if l.k() <= 1 {
                prop_assert_eq!(&m, &build_mask(Variant::Vanilla.into(), l));
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0f32..30.0, 1..12), 1..6)) {
        let width = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().cycle().take(width).copied()).collect();
        let t = Tensor::new(vec![rows.len(), width], data).unwrap();
        let s = row_softmax(&t, 0.7).unwrap();
        for r in s.rows() {
            prop_assert!(r.iter().all(|&x| x >= 0.0));
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn identical_documents_swap_without_any_change() {
    let layout = SequenceLayout::from_lengths(2, &[3, 3, 2], 2).unwrap();
    let mut inst = Instance {
        tokens: vec![1, 2, 9, 9, 9, 9, 9, 9, 5, 6, 7, 8],
        q: (0..12 * D).map(|i| ((i * 37 % 23) as f32 - 11.0) / 7.0).collect(),
        k: (0..12 * D).map(|i| ((i * 29 % 19) as f32 - 9.0) / 6.0).collect(),
        v: (0..12 * D).map(|i| ((i * 17 % 13) as f32 - 6.0) / 5.0).collect(),
        layout,
    };
    // make documents 0 and 1 identical in content and projections
    for t in 0..3 {
        for buf in [&mut inst.q, &mut inst.k, &mut inst.v] {
            let row: Vec<f32> = buf[(2 + t) * D..(3 + t) * D].to_vec();
            buf[(5 + t) * D..(6 + t) * D].copy_from_slice(&row);
        }
    }
    let (swapped, _) = permute(&inst, &[1, 0, 2]);
    let (a, _) = run(&inst, Variant::Pine.into(), true);
    let (b, _) = run(&swapped, Variant::Pine.into(), true);
    assert_eq!(a, b);
}
