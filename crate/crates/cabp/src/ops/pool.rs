//! Max pooling (argmax indices saved, so compression never touches it) and
//! global average pooling (only the input shape is needed for backward).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

/// Max pool over NCHW with implicit negative-infinity padding. Returns the
/// output and, per output element, the flat `h * W + w` argmax position in
/// the unpadded input plane. Ties resolve to the first position in scan
/// order, which keeps runs deterministic.
pub fn maxpool2d_forward<S: Scalar>(
    x: &Tensor<S>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor<S>, Vec<u32>)> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("max pool expects NCHW, got {:?}", x.shape())));
    };
    if padding.0 >= kernel.0 || padding.1 >= kernel.1 {
        return Err(Error::ShapeMismatch("max pool padding must be smaller than the kernel".into()));
    }
    let oh = (h + 2 * padding.0)
        .checked_sub(kernel.0)
        .map(|v| v / stride.0 + 1)
        .ok_or_else(|| Error::ShapeMismatch("max pool kernel larger than padded input".into()))?;
    let ow = (w + 2 * padding.1)
        .checked_sub(kernel.1)
        .map(|v| v / stride.1 + 1)
        .ok_or_else(|| Error::ShapeMismatch("max pool kernel larger than padded input".into()))?;
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut indices = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_idx = u32::MAX;
                for ki in 0..kernel.0 {
                    let ih = (oi * stride.0 + ki).wrapping_sub(padding.0);
                    if ih >= h {
                        continue;
                    }
                    for kj in 0..kernel.1 {
                        let iw = (oj * stride.1 + kj).wrapping_sub(padding.1);
                        if iw >= w {
                            continue;
                        }
                        let v = src[ih * w + iw];
                        if v > best {
                            best = v;
                            best_idx = (ih * w + iw) as u32;
                        }
                    }
                }
                out[(plane * oh + oi) * ow + oj] = best;
                indices[(plane * oh + oi) * ow + oj] = best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out, AllocCategory::Activation), indices))
}

/// Scatter-adds `dy` to the recorded argmax positions. Overlapping windows
/// can route multiple gradients to one input element.
pub fn maxpool2d_backward<S: Scalar>(
    indices: &[u32],
    input_shape: [usize; 4],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [n, c, h, w] = input_shape;
    if dy.len() != indices.len() {
        return Err(Error::ShapeMismatch("max pool dY does not match recorded indices".into()));
    }
    let per_plane = dy.len() / (n * c);
    let mut dx = vec![S::zero(); n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..][..h * w];
        let grads = &dy.data()[plane * per_plane..][..per_plane];
        let idxs = &indices[plane * per_plane..][..per_plane];
        for (&g, &i) in grads.iter().zip(idxs.iter()) {
            dst[i as usize] += g;
        }
    }
    Ok(Tensor::from_vec(vec![n, c, h, w], dx, AllocCategory::Gradient))
}

/// Mean over the spatial plane, NCHW -> (N, C).
pub fn global_avgpool_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("global avg pool expects NCHW, got {:?}", x.shape())));
    };
    if h * w == 0 {
        return Err(Error::ShapeMismatch("global avg pool over empty plane".into()));
    }
    let inv = S::one() / S::from_usize(h * w).unwrap();
    let mut out = vec![S::zero(); n * c];
    for plane in 0..n * c {
        let mut acc = S::zero();
        for &v in &x.data()[plane * h * w..][..h * w] {
            acc += v;
        }
        out[plane] = acc * inv;
    }
    Ok(Tensor::from_vec(vec![n, c], out, AllocCategory::Activation))
}

pub fn global_avgpool_backward<S: Scalar>(input_shape: &[usize], dy: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    if dy.shape() != [n, c] {
        return Err(Error::ShapeMismatch("global avg pool dY must be (N, C)".into()));
    }
    let inv = S::one() / S::from_usize(h * w).unwrap();
    let mut dx = vec![S::zero(); n * c * h * w];
    for plane in 0..n * c {
        let g = dy.data()[plane] * inv;
        dx[plane * h * w..][..h * w].fill(g);
    }
    Ok(Tensor::from_vec(vec![n, c, h, w], dx, AllocCategory::Gradient))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_window_maxima() {
        let x = Tensor::from_vec(
            vec![1, 1, 4, 4],
            vec![
                1.0f64, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                9.0, 10.0, 13.0, 14.0, //
                11.0, 12.0, 15.0, 16.0,
            ],
            AllocCategory::Activation,
        );
        let (y, idx) = maxpool2d_forward(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        assert_eq!(y.data(), &[4.0, 8.0, 12.0, 16.0]);
        assert_eq!(idx, vec![5, 7, 13, 15]);
    }

    #[test]
    fn backward_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64, 9.0, 3.0, 2.0], AllocCategory::Activation);
        let (_, idx) = maxpool2d_forward(&x, (2, 2), (2, 2), (0, 0)).unwrap();
        let dy = Tensor::from_vec(vec![1, 1, 1, 1], vec![7.0], AllocCategory::Gradient);
        let dx = maxpool2d_backward(&idx, [1, 1, 2, 2], &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        // stride 1 kernel 2: the peak sits in every window.
        let x = Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![0.0f64, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0],
            AllocCategory::Activation,
        );
        let (_, idx) = maxpool2d_forward(&x, (2, 2), (1, 1), (0, 0)).unwrap();
        let dy = Tensor::full(vec![1, 1, 2, 2], 1.0, AllocCategory::Gradient);
        let dx = maxpool2d_backward(&idx, [1, 1, 3, 3], &dy).unwrap();
        assert_eq!(dx.data()[4], 4.0);
    }

    #[test]
    fn gap_means_and_spreads_back() {
        let x = Tensor::from_vec(vec![1, 2, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0], AllocCategory::Activation);
        let y = global_avgpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 2.0]);
        let dy = Tensor::from_vec(vec![1, 2], vec![4.0, 8.0], AllocCategory::Gradient);
        let dx = global_avgpool_backward(&[1, 2, 2, 2], &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn stem_pool_shape_112_to_56() {
        let x = Tensor::<f32>::zeros(vec![1, 1, 112, 112], AllocCategory::Activation);
        let (y, _) = maxpool2d_forward(&x, (3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 56, 56]);
    }
}
