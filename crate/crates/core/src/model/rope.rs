//! Rotary position embeddings.
//!
//! Adjacent pairs `(x[2i], x[2i+1])` of each head vector are rotated by
//! `pos · theta^(-2i / d_head)`. Because the score between a rotated query
//! and key depends only on their position difference, attention can be
//! re-positioned per query by rotating raw cached keys on demand.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Precomputed cos/sin tables for positions `0..max_positions`.
#[derive(Debug, Clone)]
pub struct Rope {
    d_head: usize,
    theta: f64,
    max_positions: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Rope {
    pub fn new(d_head: usize, theta: f64, max_positions: usize) -> Result<Self> {
        if !d_head.is_multiple_of(2) {
            return Err(Error::OddHeadDim(d_head));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let (s, c) = angle(pos, i, d_head, theta).sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
        Ok(Self {
            d_head,
            theta,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Rotates one head vector to `pos`, writing into `out`.
    pub fn rotate(&self, x: &[f32], pos: usize, out: &mut [f32]) {
        let half = self.d_head / 2;
        debug_assert_eq!(x.len(), self.d_head);
        for i in 0..half {
            let (c, s) = if pos < self.max_positions {
                (self.cos[pos * half + i], self.sin[pos * half + i])
            } else {
                let (s, c) = angle(pos, i, self.d_head, self.theta).sin_cos();
                (c as f32, s as f32)
            };
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            out[2 * i] = a * c - b * s;
            out[2 * i + 1] = a * s + b * c;
        }
    }

    pub fn rotated(&self, x: &[f32], pos: usize) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        self.rotate(x, pos, &mut out);
        out
    }
}

fn angle(pos: usize, pair: usize, d_head: usize, theta: f64) -> f64 {
    pos as f64 * theta.powf(-2.0 * pair as f64 / d_head as f64)
}

/// Rotates `x: [t × h × d_head]`, token `i` to position `positions[i]`.
pub fn apply_rope(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    let &[t, h, d] = x.shape() else {
        return Err(Error::Shape(format!(
            "apply_rope expects [t, heads, d_head], got {:?}",
            x.shape()
        )));
    };
    if positions.len() != t {
        return Err(Error::Shape(format!(
            "{} positions for {t} tokens",
            positions.len()
        )));
    }
    let max = positions.iter().copied().max().map_or(0, |p| p + 1);
    let rope = Rope::new(d, theta, max)?;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for (ti, &pos) in positions.iter().enumerate() {
        for hi in 0..h {
            let off = (ti * h + hi) * d;
            rope.rotate(&x.data()[off..off + d], pos, &mut out.data_mut()[off..off + d]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;
    use proptest::prelude::*;

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::new(vec![1, 2, 4], (0..8).map(|v| v as f32 - 3.5).collect()).unwrap();
        assert_eq!(apply_rope(&x, &[0], 10_000.0).unwrap(), x);
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        assert!(matches!(Rope::new(5, 10_000.0, 4), Err(Error::OddHeadDim(5))));
        let x = Tensor::<f32>::zeros(vec![1, 1, 3]);
        assert!(apply_rope(&x, &[1], 10_000.0).is_err());
    }

    #[test]
    fn first_pair_rotates_by_position() {
        let rope = Rope::new(2, 10_000.0, 8).unwrap();
        let y = rope.rotated(&[1.0, 0.0], 1);
        assert!((y[0] - 1f32.cos()).abs() < 1e-7);
        assert!((y[1] - 1f32.sin()).abs() < 1e-7);
    }

    #[test]
    fn table_and_direct_evaluation_agree() {
        let rope = Rope::new(8, 500.0, 4).unwrap();
        let x: Vec<f32> = (0..8).map(|v| (v as f32 * 0.37).sin()).collect();
        let inside = Rope::new(8, 500.0, 64).unwrap().rotated(&x, 40);
        let outside = rope.rotated(&x, 40);
        assert_eq!(inside, outside);
    }

    proptest! {
        #[test]
        fn norm_is_preserved(x in prop::collection::vec(-1.0f32..1.0, 16), pos in 0usize..512) {
            let rope = Rope::new(16, 10_000.0, 512).unwrap();
            let y = rope.rotated(&x, pos);
            prop_assert!((dot(&x, &x).sqrt() - dot(&y, &y).sqrt()).abs() < 1e-5);
        }

        #[test]
        fn scores_depend_on_relative_position(
            q in prop::collection::vec(-1.0f32..1.0, 16),
            k in prop::collection::vec(-1.0f32..1.0, 16),
            m in 0usize..64, n in 0usize..64, s in 0usize..64,
        ) {
            let rope = Rope::new(16, 10_000.0, 256).unwrap();
            let a = dot(&rope.rotated(&q, m), &rope.rotated(&k, n));
            let b = dot(&rope.rotated(&q, m + s), &rope.rotated(&k, n + s));
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn relative_identity_worked_case() {
        let rope = Rope::new(16, 10_000.0, 32).unwrap();
        let q: Vec<f32> = (0..16).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect();
        let k: Vec<f32> = (0..16).map(|i| ((i * 3 % 7) as f32 - 3.0) * 0.2).collect();
        let a = dot(&rope.rotated(&q, 3), &rope.rotated(&k, 1));
        let b = dot(&rope.rotated(&q, 14), &rope.rotated(&k, 12));
        assert!((a - b).abs() < 1e-4);
    }
}
