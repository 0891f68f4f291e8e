//! Average-pooled storage for activation maps.
//!
//! [`compress`] pools an NCHW activation into non-overlapping block means and
//! [`inflate`] replicates those means back to the original dimensions. The
//! pooled payload plus the original shape and kernel size is everything the
//! backward pass needs; no other encoding is stored.

use crate::error::{Error, Result};
use crate::scalar::{pairwise_sum, Scalar};
use crate::tensor::{AllocCategory, Tensor};

/// Pooled activation payload: block means `z`, the original shape, and the
/// pooling kernel size.
#[derive(Debug, Clone)]
pub struct CompressedActivation<S: Scalar> {
    z: Tensor<S>,
    original_shape: [usize; 4],
    kernel: (usize, usize),
}

impl<S: Scalar> CompressedActivation<S> {
    pub fn z(&self) -> &Tensor<S> {
        &self.z
    }

    pub fn original_shape(&self) -> [usize; 4] {
        self.original_shape
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }
}

/// Pooled grid size: floor division, trailing remainder rows/columns dropped.
pub fn pooled_dims(h: usize, w: usize, kernel: (usize, usize)) -> (usize, usize) {
    (h / kernel.0, w / kernel.1)
}

/// Pools `x` (NCHW) into block means over non-overlapping `kernel` blocks.
///
/// Block sums are accumulated pairwise, so pooling a constant block returns
/// exactly that constant for power-of-two block sizes.
pub fn compress<S: Scalar>(x: &Tensor<S>, kernel: (usize, usize)) -> Result<CompressedActivation<S>> {
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 {
        return Err(Error::ShapeMismatch("pooling kernel components must be >= 1".into()));
    }
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "compress expects NCHW input, got shape {:?}",
            x.shape()
        )));
    };
    let (zh, zw) = pooled_dims(h, w, kernel);
    if zh == 0 || zw == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pooling kernel ({kh}, {kw}) leaves no complete block on a {h}x{w} map"
        )));
    }

    let inv = S::one() / S::from_usize(kh * kw).unwrap();
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * zh * zw);
    let mut block = Vec::with_capacity(kh * kw);
    for plane in 0..n * c {
        let base = plane * h * w;
        for zi in 0..zh {
            for zj in 0..zw {
                block.clear();
                for di in 0..kh {
                    let row = base + (zi * kh + di) * w + zj * kw;
                    block.extend_from_slice(&src[row..row + kw]);
                }
                out.push(pairwise_sum(&block) * inv);
            }
        }
    }

    Ok(CompressedActivation {
        z: Tensor::from_vec(vec![n, c, zh, zw], out, AllocCategory::Activation),
        original_shape: [n, c, h, w],
        kernel,
    })
}

/// Replicates the stored block means back to the original dimensions.
///
/// Positions beyond the pooled grid (remainder rows/columns dropped by
/// [`compress`]) clamp to the nearest block mean.
pub fn inflate<S: Scalar>(compressed: &CompressedActivation<S>) -> Tensor<S> {
    let [n, c, h, w] = compressed.original_shape;
    let (kh, kw) = compressed.kernel;
    let zh = compressed.z.shape()[2];
    let zw = compressed.z.shape()[3];
    let src = compressed.z.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        let base = plane * zh * zw;
        for i in 0..h {
            let zi = (i / kh).min(zh - 1);
            for j in 0..w {
                let zj = (j / kw).min(zw - 1);
                out.push(src[base + zi * zw + zj]);
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], out, AllocCategory::Scratch)
}

/// Byte size of the stored payload, as used by the ledger and static model.
pub fn compressed_bytes<S: Scalar>(compressed: &CompressedActivation<S>) -> u64 {
    compressed.z.byte_size()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: f64 = (1u64 << 20) as f64;

    fn nchw<S: Scalar>(n: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Tensor<S> {
        Tensor::from_vec(vec![n, c, h, w], data, AllocCategory::Activation)
    }

    #[test]
    fn block_constant_4x4_pools_to_corners() {
        let x = nchw(
            1,
            1,
            4,
            4,
            vec![
                1.0f64, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ],
        );
        let z = compress(&x, (2, 2)).unwrap();
        assert_eq!(z.z().shape(), &[1, 1, 2, 2]);
        assert_eq!(z.z().data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = inflate(&z);
        assert!(back.bit_eq(&x.recategorized(back.category())));
    }

    #[test]
    fn kernel_1x1_is_identity() {
        let x = nchw(2, 3, 3, 5, (0..90).map(|v| v as f32 * 0.37).collect());
        let z = compress(&x, (1, 1)).unwrap();
        assert_eq!(z.z().data(), x.data());
        assert_eq!(compressed_bytes(&z), x.byte_size());
        let back = inflate(&z);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn seven_by_seven_kernel_4_keeps_top_left_block_mean() {
        let data: Vec<f64> = (0..49).map(|v| v as f64).collect();
        let x = nchw(1, 1, 7, 7, data.clone());
        let z = compress(&x, (4, 4)).unwrap();
        assert_eq!(z.z().shape(), &[1, 1, 1, 1]);
        let mut expect = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                expect += data[i * 7 + j];
            }
        }
        expect /= 16.0;
        assert_eq!(z.z().data()[0], expect);
    }

    #[test]
    fn table_style_payload_bytes() {
        // Pooling a (32, 3, 224, 224) f32 map by 2x2 stores (32, 3, 112, 112).
        let z = compress(&Tensor::<f32>::zeros(vec![32, 3, 224, 224], AllocCategory::Activation), (2, 2))
            .unwrap();
        assert_eq!(z.z().shape(), &[32, 3, 112, 112]);
        assert!((compressed_bytes(&z) as f64 / MIB - 4.59375).abs() < 1e-9);
        // (32, 512, 7, 7) by 4x4 floors to a 1x1 grid: 0.0625 MiB.
        let z = compress(&Tensor::<f32>::zeros(vec![32, 512, 7, 7], AllocCategory::Activation), (4, 4))
            .unwrap();
        assert!((compressed_bytes(&z) as f64 / MIB - 0.0625).abs() < 1e-9);
        // 2x2 pooling of (32, 64, 56, 56) stores 6.125 MiB.
        let z = compress(&Tensor::<f32>::zeros(vec![32, 64, 56, 56], AllocCategory::Activation), (2, 2))
            .unwrap();
        assert!((compressed_bytes(&z) as f64 / MIB - 6.125).abs() < 1e-9);
    }

    #[test]
    fn empty_block_grid_is_an_error() {
        let x = nchw(1, 1, 3, 3, vec![0.0f32; 9]);
        assert!(compress(&x, (4, 4)).is_err());
        assert!(compress(&x, (1, 4)).is_err());
        assert!(compress(&x, (0, 1)).is_err());
    }

    /// Independent position-mapping oracle for inflation with remainders:
    /// enumerate every output position and look the mean up directly.
    #[test]
    fn inflate_5x5_with_2x2_kernel_clamps_remainders() {
        let data: Vec<f64> = (0..25).map(|v| v as f64 * 0.125).collect();
        let x = nchw(1, 1, 5, 5, data);
        let compressed = compress(&x, (2, 2)).unwrap();
        assert_eq!(compressed.z().shape(), &[1, 1, 2, 2]);
        let z = compressed.z().data().to_vec();
        let back = inflate(&compressed);
        for h in 0..5 {
            for w in 0..5 {
                let zi = (h / 2).min(1);
                let zj = (w / 2).min(1);
                assert_eq!(back.data()[h * 5 + w], z[zi * 2 + zj], "position ({h}, {w})");
            }
        }
    }

    #[test]
    fn means_stay_within_input_range() {
        let data: Vec<f32> = (0..36).map(|v| ((v * 7919) % 23) as f32 - 11.0).collect();
        let x = nchw(1, 1, 6, 6, data.clone());
        let z = compress(&x, (3, 3)).unwrap();
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in z.z().data() {
            assert!(v >= lo && v <= hi);
        }
    }
}
