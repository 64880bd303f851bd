//! A slow float64 forward pass written with plain loops.
//!
//! Nothing here calls into the runtime's kernels, masks, position logic or
//! hashing; only the weights and the layout are shared. It exists so that
//! a bug in the fast path cannot hide by also being present in its check.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::modes::{Aggregation, AttentionMode, Variant};
use crate::prompt::SequenceLayout;

/// Longest sequence the reference accepts.
pub const MAX_REFERENCE_LEN: usize = 512;

fn fnv1a(tokens: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Document index of token `t`, if it lies inside one.
fn doc_of(layout: &SequenceLayout, t: usize) -> Option<usize> {
    (0..layout.k()).find(|&d| {
        let s = layout.doc_span(d);
        s.start <= t && t < s.end
    })
}

fn can_see(variant: Variant, layout: &SequenceLayout, q: usize, k: usize) -> bool {
    let causal = k <= q;
    let across = match (doc_of(layout, q), doc_of(layout, k)) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    };
    match variant {
        Variant::Vanilla => causal,
        Variant::Nia | Variant::Pcw | Variant::Sp => causal && !across,
        Variant::Pine | Variant::PineNoReassign | Variant::PineReverse => causal || across,
    }
}

fn rotate(x: &[f64], pos: usize, theta: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let a = pos as f64 / theta.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = x[2 * i] * a.cos() - x[2 * i + 1] * a.sin();
        out[2 * i + 1] = x[2 * i] * a.sin() + x[2 * i + 1] * a.cos();
    }
    out
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Position of every token `0..n` as seen by query `q`.
fn positions_for(
    mode: AttentionMode,
    layout: &SequenceLayout,
    tokens: &[u32],
    q: usize,
    qs: &[Vec<f64>],
    ks: &[Vec<f64>],
) -> Vec<usize> {
    let n = layout.n();
    let pre = layout.prefix_len();
    match mode.variant {
        Variant::Vanilla | Variant::Nia | Variant::PineNoReassign => (0..n).collect(),
        Variant::Pcw | Variant::Sp => {
            let longest = (0..layout.k()).map(|d| layout.doc_len(d)).max().unwrap_or(0);
            (0..n)
                .map(|t| match doc_of(layout, t) {
                    Some(d) => pre + t - layout.doc_span(d).start,
                    None if t < pre => t,
                    None => pre + longest + t - layout.suffix_start(),
                })
                .collect()
        }
        Variant::Pine | Variant::PineReverse => {
            if q < pre {
                return (0..n).collect();
            }
            let own = doc_of(layout, q);
            let queries: Vec<usize> = match own {
                Some(d) => layout.doc_span(d).collect(),
                None => vec![q],
            };
            let cands: Vec<usize> = (0..layout.k()).filter(|&d| Some(d) != own).collect();
            let cand_tokens: Vec<usize> = cands.iter().flat_map(|&d| layout.doc_span(d)).collect();
            let d_head = qs[0].len() as f64;
            let mut score = vec![0.0f64; layout.k()];
            for &i in &queries {
                let logits: Vec<f64> = cand_tokens
                    .iter()
                    .map(|&j| inner(&qs[i], &ks[j]) / d_head.sqrt())
                    .collect();
                if logits.is_empty() {
                    continue;
                }
                let p = softmax(&logits);
                for (&j, &pj) in cand_tokens.iter().zip(&p) {
                    let d = doc_of(layout, j).unwrap();
                    score[d] = match mode.aggregation {
                        Aggregation::Max => score[d].max(pj),
                        _ => score[d] + pj,
                    };
                }
            }
            if mode.aggregation == Aggregation::Mean {
                for &d in &cands {
                    score[d] /= layout.doc_len(d) as f64;
                }
            }
            let hash = |d: usize| fnv1a(&tokens[layout.doc_span(d)]);
            let mut order = cands.clone();
            order.sort_by(|&a, &b| {
                let by_score = match mode.variant {
                    Variant::PineReverse => score[b].partial_cmp(&score[a]).unwrap(),
                    _ => score[a].partial_cmp(&score[b]).unwrap(),
                };
                by_score.then(hash(a).cmp(&hash(b))).then(a.cmp(&b))
            });
            order.extend(own);
            let mut pos: Vec<usize> = (0..n).collect();
            let mut next = pre;
            for d in order {
                for t in layout.doc_span(d) {
                    pos[t] = next;
                    next += 1;
                }
            }
            pos
        }
    }
}

/// One attention head over the whole layout in float64.
///
/// `q`, `k`, `v` hold one un-rotated `d_head` row per token. Returns one
/// output row per token.
pub fn reference_head_attention(
    mode: AttentionMode,
    layout: &SequenceLayout,
    tokens: &[u32],
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    theta: f64,
) -> Vec<Vec<f64>> {
    let n = layout.n();
    let d = q[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let pos = positions_for(mode, layout, tokens, i, q, k);
        let qr = rotate(&q[i], pos[i], theta);
        let keys: Vec<usize> = (0..n).filter(|&j| can_see(mode.variant, layout, i, j)).collect();
        let logits: Vec<f64> = keys
            .iter()
            .map(|&j| inner(&qr, &rotate(&k[j], pos[j], theta)) / (d as f64).sqrt())
            .collect();
        let mut w = softmax(&logits);
        if mode.variant == Variant::Sp && i >= layout.suffix_start() && layout.k() > 1 {
            for (wj, &j) in w.iter_mut().zip(&keys) {
                if doc_of(layout, j).is_some() {
                    *wj /= layout.k() as f64;
                }
            }
            let z: f64 = w.iter().sum();
            for wj in w.iter_mut() {
                *wj /= z;
            }
        }
        for (wj, &j) in w.iter().zip(&keys) {
            for c in 0..d {
                out[i][c] += wj * v[j][c];
            }
        }
    }
    out
}

fn matrix(t: &crate::tensor::Tensor) -> (usize, usize, Vec<f64>) {
    let s = t.shape();
    let cols = if s.len() == 2 { s[1] } else { 1 };
    (s[0], cols, t.data().iter().map(|&x| x as f64).collect())
}

/// `x · W` for `x: rows × in` and `W` stored `[in, out]`.
fn project(x: &[Vec<f64>], w: &crate::tensor::Tensor) -> Vec<Vec<f64>> {
    let (rows, cols, data) = matrix(w);
    x.iter()
        .map(|xi| {
            let mut y = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    y[c] += xi[r] * data[r * cols + c];
                }
            }
            y
        })
        .collect()
}

fn rms(x: &[f64], gain: &crate::tensor::Tensor, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain.data()).map(|(v, &g)| v * s * g as f64).collect()
}

/// Next-token logits of the last token, computed from scratch in float64.
pub fn dense_reference(
    model: &Model,
    tokens: &[u32],
    layout: &SequenceLayout,
    mode: AttentionMode,
) -> Result<Vec<f64>> {
    let n = tokens.len();
    if n > MAX_REFERENCE_LEN {
        return Err(Error::OracleTooLarge {
            len: n,
            max: MAX_REFERENCE_LEN,
        });
    }
    if n == 0 || layout.n() != n {
        return Err(Error::Layout(format!(
            "reference needs a non-empty layout matching {n} tokens"
        )));
    }
    let c = model.config();
    let w = model.weights();
    let (dh, eps) = (c.d_head, c.norm_eps);
    let (_, dm, emb) = matrix(&w.token_embedding);
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * dm..(t as usize + 1) * dm].to_vec())
        .collect();

    for lw in &w.layers {
        let xn: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &lw.attention_norm, eps)).collect();
        let q = project(&xn, &lw.wq);
        let k = project(&xn, &lw.wk);
        let v = project(&xn, &lw.wv);
        let mut attn = vec![vec![0.0; c.n_heads * dh]; n];
        for head in 0..c.n_heads {
            let kv = head / (c.n_heads / c.n_kv_heads);
            let slice = |m: &Vec<Vec<f64>>, hh: usize| -> Vec<Vec<f64>> {
                m.iter().map(|row| row[hh * dh..(hh + 1) * dh].to_vec()).collect()
            };
            let out = reference_head_attention(
                mode,
                layout,
                tokens,
                &slice(&q, head),
                &slice(&k, kv),
                &slice(&v, kv),
                c.rope_theta,
            );
            for i in 0..n {
                attn[i][head * dh..(head + 1) * dh].copy_from_slice(&out[i]);
            }
        }
        let o = project(&attn, &lw.wo);
        for i in 0..n {
            for j in 0..dm {
                h[i][j] += o[i][j];
            }
        }
        let xn: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &lw.ffn_norm, eps)).collect();
        let gate = project(&xn, &lw.w_gate);
        let up = project(&xn, &lw.w_up);
        let act: Vec<Vec<f64>> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = project(&act, &lw.w_down);
        for i in 0..n {
            for j in 0..dm {
                h[i][j] += down[i][j];
            }
        }
    }
    let last = rms(&h[n - 1], &w.final_norm, eps);
    let logits = match &w.lm_head {
        Some(head) => project(&[last], head).remove(0),
        None => (0..c.vocab_size)
            .map(|t| inner(&last, &emb[t * dm..(t + 1) * dm]))
            .collect(),
    };
    Ok(logits)
}
