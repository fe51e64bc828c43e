//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! Values live in [`Tensor`], a row-major buffer with an explicit shape.
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] then walks the records in reverse
//! creation order (which is a valid reverse topological order, since a
//! node can only refer to nodes created before it) and accumulates
//! gradients.
//!
//! A tape is built fresh for every forward pass and dropped afterwards.

mod kernels;
mod ops;
mod tape;

pub use kernels::{downsample_avg_values, flip_h, flip_v, sigmoid, upsample_bilinear_values};
pub use ops::{attention_block, AttentionOutput, AttentionParams};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized extent in shape {0:?}")]
    EmptyExtent(Vec<usize>),
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: target value {value} outside [0, 1]")]
    TargetRange { op: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}

/// Row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Populated when the tensor is a parameter that took part in a backward pass.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same values under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.values.clone())
    }

    /// Extents of a `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => dim_err("chw", format!("expected [C, H, W], got {s:?}")),
        }
    }

    /// One channel of a `[C, H, W]` tensor as `[1, H, W]`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (ch, h, w) = self.chw()?;
        if c >= ch {
            return dim_err("channel", format!("channel {c} out of range for {ch}"));
        }
        Tensor::new(vec![1, h, w], self.values[c * h * w..(c + 1) * h * w].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Gradient buffer, or zeros when no backward pass has touched this tensor.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad
            .clone()
            .unwrap_or_else(|| vec![0.0; self.values.len()])
    }
}

/// Central-difference estimate of the gradient of `f` at `x`.
///
/// Evaluates `f` twice per coordinate: `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
    let mut probe = x.clone();
    probe.grad = None;
    (0..x.len())
        .map(|i| {
            let orig = probe.values[i];
            probe.values[i] = orig + eps;
            let plus = f(&probe);
            probe.values[i] = orig - eps;
            let minus = f(&probe);
            probe.values[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Relative error used by the gradient checks.
///
/// `|a - b| / max(|a|, |b|)`, with pairs whose magnitudes are both below
/// `floor` compared absolutely against `floor`.
pub fn grad_rel_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        (a - b).abs() / floor
    } else {
        (a - b).abs() / scale
    }
}
