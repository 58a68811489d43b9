//! Dense 64-bit tensors and the reverse-mode differentiation tape.
//!
//! The engine is deliberately small: it provides exactly the primitives the
//! forecasting model needs (matmul, causal 1-d convolution, elementwise ops,
//! concat, scatter/gather) plus a finite-difference oracle for checking every
//! backward rule. Everything is `f64`; there is no broadcasting beyond
//! trailing-dimension bias adds.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Tape, TapeId};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("window too short: time extent {t} < kernel {k}")]
    WindowTooShort { t: usize, k: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("invalid shape {shape:?} for {len} data elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-2 tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    details: format!("ragged row of length {} (expected {c})", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    /// Copy with axes reordered; `axes[i]` names the source axis placed at `i`.
    pub fn permuted(&self, axes: &[usize]) -> Result<Self, TensorError> {
        if axes.len() != self.rank() || {
            let mut seen = vec![false; axes.len()];
            axes.iter().any(|&a| {
                a >= axes.len() || std::mem::replace(&mut seen[a], true)
            })
        } {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                details: format!("axes {axes:?} invalid for rank {}", self.rank()),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = Tensor::zeros(&out_shape);
        let src_strides = strides(&self.shape);
        let out_strides = strides(&out_shape);
        for (flat, &v) in self.data.iter().enumerate() {
            // Decode the source index, re-encode in output order.
            let mut out_off = 0;
            for (dst_axis, &src_axis) in axes.iter().enumerate() {
                let ix = flat / src_strides[src_axis] % self.shape[src_axis];
                out_off += ix * out_strides[dst_axis];
            }
            out.data[out_off] = v;
        }
        Ok(out)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor (plain arithmetic, not taped).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += scale * other` over identical shapes.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[1, 2]), 5.0);
    }

    #[test]
    fn permute_swaps_axes() {
        // [2x3] -> [3x2] transpose.
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = t.permuted(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(p.get(&[j, i]), t.get(&[i, j]));
            }
        }
        // Permuting back restores the original exactly.
        assert_eq!(p.permuted(&[1, 0]).unwrap(), t);
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(t.permuted(&[0, 0]).is_err());
        assert!(t.permuted(&[0]).is_err());
    }
}
