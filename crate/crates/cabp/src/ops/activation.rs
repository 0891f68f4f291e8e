//! ReLU with a byte-per-element sign mask saved for backward.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

/// Returns `max(x, 0)` and the positive-entry mask the backward pass needs.
pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<u8>) {
    let mut mask = vec![0u8; x.len()];
    let data: Vec<S> = x
        .data()
        .iter()
        .zip(mask.iter_mut())
        .map(|(&v, m)| {
            if v > S::zero() {
                *m = 1;
                v
            } else {
                S::zero()
            }
        })
        .collect();
    (Tensor::from_vec(x.shape().to_vec(), data, AllocCategory::Activation), mask)
}

pub fn relu_backward<S: Scalar>(mask: &[u8], shape: &[usize], dy: &Tensor<S>) -> Result<Tensor<S>> {
    if dy.shape() != shape || dy.len() != mask.len() {
        return Err(Error::ShapeMismatch("relu dY shape differs from forward input".into()));
    }
    let data = dy
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&g, &m)| if m == 1 { g } else { S::zero() })
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data, AllocCategory::Gradient))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives_and_passes_positives() {
        let x = Tensor::from_vec(vec![2], vec![-1.0f64, 2.0], AllocCategory::Activation);
        let (y, mask) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0]);
        assert_eq!(mask, vec![0, 1]);
    }

    #[test]
    fn gradient_at_zero_is_zero() {
        let x = Tensor::from_vec(vec![3], vec![0.0f64, -0.0, 1.0], AllocCategory::Activation);
        let (_, mask) = relu_forward(&x);
        let dy = Tensor::full(vec![3], 5.0, AllocCategory::Gradient);
        let dx = relu_backward(&mask, &[3], &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn chained_relu_passes_positive_input_through() {
        let x = Tensor::from_vec(vec![2], vec![0.5f64, 3.0], AllocCategory::Activation);
        let (y1, m1) = relu_forward(&x);
        let (y2, m2) = relu_forward(&y1);
        assert_eq!(y2.data(), x.data());
        let dy = Tensor::from_vec(vec![2], vec![1.0, -2.0], AllocCategory::Gradient);
        let d1 = relu_backward(&m2, &[2], &dy).unwrap();
        let d0 = relu_backward(&m1, &[2], &d1).unwrap();
        assert_eq!(d0.data(), dy.data());
    }
}
