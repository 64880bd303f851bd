//! Dense row-major tensors and the deterministic kernels built on them.
//!
//! Every reduction runs serially in ascending index order, so a kernel given
//! the same inputs returns bitwise-identical outputs on every run. Row `i` of
//! any row-wise kernel depends only on row `i` of its inputs.
//!
//! Masked entries are carried as `NEG_INFINITY` logits; [`row_softmax`] maps
//! them to exactly zero.

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type tag of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("float32"),
            DType::F64 => f.write_str("float64"),
        }
    }
}

/// Scalar types a tensor may hold.
pub trait Element: Float + Default + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
}

/// A dense row-major array. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        let w = self.row_width().max(1);
        self.data.chunks(w)
    }

    fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn ensure_finite<T: Element>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `c = a · b` for `a: [m×p]`, `b: [p×q]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, p) = a.dims2()?;
    let (p2, q) = b.dims2()?;
    if p != p2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: [{m}x{p}] x [{p2}x{q}]"
        )));
    }
    let mut out = vec![T::zero(); m * q];
    for i in 0..m {
        let a_row = &a.data[i * p..(i + 1) * p];
        let c_row = &mut out[i * q..(i + 1) * q];
        // i-r-j order: each c[i][j] still accumulates over r ascending.
        for (r, &a_ir) in a_row.iter().enumerate() {
            let b_row = &b.data[r * q..(r + 1) * q];
            for (c, &b_rj) in c_row.iter_mut().zip(b_row) {
                *c = *c + a_ir * b_rj;
            }
        }
    }
    ensure_finite(&out, "matmul")?;
    Tensor::new(vec![m, q], out)
}

/// Softmax of `scale · row` computed in place, in slice order.
///
/// `NEG_INFINITY` entries are masked and come out as exactly zero.
pub fn softmax_in_place<T: Element>(row: &mut [T], scale: T) -> Result<()> {
    let neg_inf = T::neg_infinity();
    let mut max = neg_inf;
    for x in row.iter_mut() {
        if *x != neg_inf {
            *x = *x * scale;
            if *x > max {
                max = *x;
            }
        }
    }
    if max == neg_inf {
        return Err(Error::FullyMaskedRow { row: 0 });
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = if *x == neg_inf {
            T::zero()
        } else {
            (*x - max).exp()
        };
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    ensure_finite(row, "row_softmax")
}

/// Row-wise softmax of `scale · x` for `x: [m×n]`.
pub fn row_softmax<T: Element>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if n == 0 {
        return Err(Error::Shape("row_softmax needs at least one column".into()));
    }
    let mut out = x.clone();
    for i in 0..m {
        softmax_in_place(out.row_mut(i), scale).map_err(|e| match e {
            Error::FullyMaskedRow { .. } => Error::FullyMaskedRow { row: i },
            other => other,
        })?;
    }
    Ok(out)
}

/// Normalizes one row by its root mean square and multiplies by `gain`.
pub fn rms_norm_row<T: Element>(x: &[T], gain: &[T], eps: T, out: &mut [T]) {
    let mut sum_sq = T::zero();
    for &v in x {
        sum_sq = sum_sq + v * v;
    }
    let n = T::from(x.len()).unwrap_or_else(T::one);
    let inv = T::one() / (sum_sq / n + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// RMS normalization of every row of `x: [n×d]` with `gain: [d]`.
pub fn rms_norm<T: Element>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if gain.shape() != [d] {
        return Err(Error::Shape(format!(
            "rms_norm gain has shape {:?}, expected [{d}]",
            gain.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("rms_norm eps must be positive".into()));
    }
    let mut out = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        rms_norm_row(x.row(i), gain.data(), eps, out.row_mut(i));
    }
    ensure_finite(out.data(), "rms_norm")?;
    Ok(out)
}

pub fn silu<T: Element>(t: T) -> T {
    t / (T::one() + (-t).exp())
}

/// Gated linear unit `silu(gate) ⊙ up`.
pub fn swiglu<T: Element>(gate: &Tensor<T>, up: &Tensor<T>) -> Result<Tensor<T>> {
    if gate.shape() != up.shape() {
        return Err(Error::Shape(format!(
            "swiglu operands differ: {:?} vs {:?}",
            gate.shape(),
            up.shape()
        )));
    }
    let data: Vec<T> = gate
        .data
        .iter()
        .zip(&up.data)
        .map(|(&g, &u)| silu(g) * u)
        .collect();
    ensure_finite(&data, "swiglu")?;
    Tensor::new(gate.shape.clone(), data)
}

/// Elementwise in-place `a += b`.
pub fn add_assign<T: Element>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x = *x + y;
    }
    Ok(())
}

pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}
