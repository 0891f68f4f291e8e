//! Dense row-major tensors tagged with an allocation category.
//!
//! Element buffers are immutable once written and shared on clone, so passing
//! tensors between layers or threads never copies data. Mutation goes through
//! [`Tensor::data_mut`], which copies only when the buffer is shared.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What a tensor's bytes count as in the memory ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllocCategory {
    Parameter,
    Activation,
    Gradient,
    OptimizerState,
    Input,
    Scratch,
}

impl AllocCategory {
    pub const ALL: [AllocCategory; 6] = [
        AllocCategory::Parameter,
        AllocCategory::Activation,
        AllocCategory::Gradient,
        AllocCategory::OptimizerState,
        AllocCategory::Input,
        AllocCategory::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AllocCategory::Parameter => "parameter",
            AllocCategory::Activation => "activation",
            AllocCategory::Gradient => "gradient",
            AllocCategory::OptimizerState => "optimizer_state",
            AllocCategory::Input => "input",
            AllocCategory::Scratch => "scratch",
        }
    }

    pub fn index(self) -> usize {
        AllocCategory::ALL.iter().position(|c| *c == self).unwrap()
    }
}

/// Dense N-dimensional array. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    category: AllocCategory,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>, category: AllocCategory) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count must match shape"
        );
        Tensor { shape, data: Arc::new(data), category }
    }

    pub fn zeros(shape: Vec<usize>, category: AllocCategory) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![S::zero(); n]), category }
    }

    pub fn full(shape: Vec<usize>, value: S, category: AllocCategory) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; n]), category }
    }

    pub fn scalar(value: S, category: AllocCategory) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]), category }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn category(&self) -> AllocCategory {
        self.category
    }

    /// Logical size in bytes, as tracked by the memory ledger.
    pub fn byte_size(&self) -> u64 {
        (self.len() * std::mem::size_of::<S>()) as u64
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer, different shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor<S> {
        assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor { shape, data: Arc::clone(&self.data), category: self.category }
    }

    /// Same data viewed under a different ledger category.
    pub fn recategorized(&self, category: AllocCategory) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), category }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data), category: self.category }
    }

    /// True if shapes and element bit patterns are identical.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Elementwise sum; `other` may broadcast over leading singleton dims.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a + b)
    }

    /// Elementwise product; same broadcasting rule as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: S) -> Tensor<S> {
        self.map(|v| v * factor)
    }

    /// Elementwise `self >= other` as a 0/1 mask. Not differentiable.
    pub fn ge_mask(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| if a >= b { S::one() } else { S::zero() })
    }

    /// Sum of all elements in fixed row-major order.
    pub fn sum_all(&self) -> S {
        let mut acc = S::zero();
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    /// Maximum along `axis`, removing that axis from the shape.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.max_axis_argmax(axis).map(|(t, _)| t)
    }

    /// Maximum along `axis` plus the winning position per output element.
    /// Ties go to the lowest position.
    pub fn max_axis_argmax(&self, axis: usize) -> Result<(Tensor<S>, Vec<u32>)> {
        if axis >= self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        if self.shape[axis] == 0 {
            return Err(Error::ShapeMismatch("max over empty axis".into()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![S::neg_infinity(); outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    let v = self.data[base + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                        argmax[o * inner + i] = m as u32;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok((Tensor::from_vec(shape, out, self.category), argmax))
    }

    fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data: Arc::new(data),
                category: self.category,
            });
        }
        // Broadcasting is limited to leading singleton dims of the smaller
        // operand, e.g. (1, 3, 4) against (2, 3, 4).
        let (big, small, swapped) = if self.len() >= other.len() {
            (self, other, false)
        } else {
            (other, self, true)
        };
        let offset = big.rank().checked_sub(small.rank()).ok_or_else(|| {
            Error::ShapeMismatch(format!("cannot combine {:?} with {:?}", self.shape, other.shape))
        })?;
        let mut lead = offset;
        while lead < big.rank() && small.shape[lead - offset] == 1 && big.shape[lead] != 1 {
            lead += 1;
        }
        let compatible = big.shape[lead..] == small.shape[lead - offset..];
        if !compatible {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let tail: usize = big.shape[lead..].iter().product();
        if tail != small.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let data = big
            .data
            .chunks(tail.max(1))
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(small.data.iter())
                    .map(|(&b, &s)| if swapped { f(s, b) } else { f(b, s) })
            })
            .collect();
        Ok(Tensor { shape: big.shape.clone(), data: Arc::new(data), category: self.category })
    }
}
