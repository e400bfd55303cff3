//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: its buffer sits behind an `Arc`, so
//! clones are cheap and a tensor can be handed to another thread freely.
//! Volumes use the axis order `N, C, D, H, W` throughout the crate.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < d, "index {index:?} out of bounds for axis {i}");
            off = off * d + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    /// Bitwise equality of shape and every value (distinguishes `-0.0`).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.numel() {
            out.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Index of the largest value along `axis`, first index on ties.
    pub fn argmax_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid("argmax_axis", format!("axis {axis} for rank {}", self.rank())));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if self.data[base + k * inner] > self.data[base + best * inner] {
                        best = k;
                    }
                }
                out.push(best as f64);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_parts(shape, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        assert_eq!(t.get(&[1, 2, 3]), 123.0);
        assert_eq!(t.data()[t.offset(&[1, 0, 2])], 102.0);
    }

    #[test]
    fn permute_matches_index_mapping() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(p.get(&[a, b, c]), t.get(&[b, c, a]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn argmax_takes_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 5.0, 5.0, 0.0, -1.0, 0.0]).unwrap();
        let a = t.argmax_axis(1).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0]);
    }
}
