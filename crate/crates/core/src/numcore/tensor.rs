use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major float64 tensor. Every dimension is at least 1.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidData(format!(
                "tensor shape {shape:?} must be non-empty with dims >= 1"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidData(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Caller guarantees `shape` is valid for `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two shapes of possibly different rank (left-padded with 1s).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = pad_left(a, rank);
    let pb = pad_left(b, rank);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }),
        })
        .collect()
}

pub(crate) fn pad_left(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// For every linear index of `out`, the linear index of the broadcast source `inp`.
pub(crate) fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out.is_empty() {
        return vec![0];
    }
    let inp = pad_left(inp, out.len());
    if let Some((outer, mid, inner)) = block_broadcast(out, &inp) {
        let mut result = Vec::with_capacity(n);
        for _ in 0..outer {
            for m in 0..mid {
                result.extend(std::iter::repeat(m).take(inner));
            }
        }
        return result;
    }
    let in_strides = strides(&inp);
    let eff: Vec<usize> = inp
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut offset = 0usize;
    let mut result = Vec::with_capacity(n);
    for _ in 0..n {
        result.push(offset);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            offset += eff[axis];
            if idx[axis] < out[axis] {
                break;
            }
            offset -= eff[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    result
}

/// `Some((outer, mid, inner))` when `inp` matches `out` on one contiguous run
/// of axes and is 1 elsewhere, e.g. a `[1, K, 1, 1]` bias.
fn block_broadcast(out: &[usize], inp: &[usize]) -> Option<(usize, usize, usize)> {
    let kept: Vec<usize> = (0..out.len()).filter(|&a| inp[a] != 1).collect();
    let (lo, hi) = match (kept.first(), kept.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi + 1),
        _ => (0, 0),
    };
    if (lo..hi).any(|a| inp[a] != out[a]) {
        return None;
    }
    Some((
        out[..lo].iter().product(),
        out[lo..hi].iter().product(),
        out[hi..].iter().product(),
    ))
}

/// (outer, axis length, inner) decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
