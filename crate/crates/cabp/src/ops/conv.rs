//! 2D convolution (cross-correlation) forward and the three backward passes.
//!
//! The forward pass is always exact; the save policy only decides what gets
//! stored for backward. Input and bias gradients are computed from the weight
//! tensor and the output gradient alone and never touch the saved activation,
//! which is what keeps the propagated gradient exact when the stored
//! activation is pooled. Only the weight gradient reads the saved payload.

use crate::error::{Error, Result};
use crate::ops::gemm::{matmul_acc, matmul_tn_acc};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

/// Static description of a convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            has_bias: false,
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Output spatial size: `floor((d + 2p - k) / s) + 1`, which must be >= 1.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.padding.0).checked_sub(self.kernel.0);
        let ow = (w + 2 * self.padding.1).checked_sub(self.kernel.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh / self.stride.0 + 1, ow / self.stride.1 + 1)),
            _ => Err(Error::ShapeMismatch(format!(
                "kernel {:?} with padding {:?} exceeds input {h}x{w}",
                self.kernel, self.padding
            ))),
        }
    }
}

/// Per-layer rule for what the tape stores for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SavePolicy {
    Full,
    Pooled((usize, usize)),
}

impl SavePolicy {
    pub fn describe(&self) -> String {
        match self {
            SavePolicy::Full => "full".to_string(),
            SavePolicy::Pooled((kh, kw)) => format!("pooled{kh}x{kw}"),
        }
    }
}

fn check_input<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &Conv2dSpec) -> Result<[usize; 4]> {
    let &[n, c, h, wd] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("conv2d expects NCHW input, got {:?}", x.shape())));
    };
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight shape {:?} does not match spec {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    Ok([n, c, h, wd])
}

/// Writes one sample's patch matrix: rows are `(ci, ki, kj)`, columns are
/// output positions. Out-of-range positions contribute zero.
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * p..][..p];
                for oi in 0..oh {
                    let ih = (oi * sh + ki).wrapping_sub(ph);
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ih >= h {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &x[(ci * h + ih) * w..][..w];
                    if sw == 1 {
                        // Contiguous middle with zero head/tail.
                        let lo = pw.saturating_sub(kj).min(ow);
                        let hi = if w + pw > kj { (w + pw - kj).min(ow) } else { 0 };
                        dst[..lo].fill(S::zero());
                        if hi > lo {
                            dst[lo..hi].copy_from_slice(&src_row[lo + kj - pw..hi + kj - pw]);
                        }
                        dst[hi.max(lo)..].fill(S::zero());
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let iw = (oj * sw + kj).wrapping_sub(pw);
                            *d = if iw < w { src_row[iw] } else { S::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Transposed patch matrix: rows are output positions, columns `(ci, ki, kj)`.
fn im2col_t<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    spec: &Conv2dSpec,
    oh: usize,
    ow: usize,
    col_t: &mut [S],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let k = c * kh * kw;
    for oi in 0..oh {
        for oj in 0..ow {
            let row = &mut col_t[(oi * ow + oj) * k..][..k];
            let mut r = 0;
            for ci in 0..c {
                for ki in 0..kh {
                    let ih = (oi * sh + ki).wrapping_sub(ph);
                    for kj in 0..kw {
                        let iw = (oj * sw + kj).wrapping_sub(pw);
                        row[r] = if ih < h && iw < w { x[(ci * h + ih) * w + iw] } else { S::zero() };
                        r += 1;
                    }
                }
            }
        }
    }
}

/// Exact cross-correlation `Y = X * W (+ b)`, independent of any save policy.
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<S>> {
    let [n, c, h, wd] = check_input(x, w, spec)?;
    let (oh, ow) = spec.output_hw(h, wd)?;
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {:?}, expected [{}]",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    let m = spec.out_channels;
    let k = c * spec.kernel.0 * spec.kernel.1;
    let p = oh * ow;
    let mut out = vec![S::zero(); n * m * p];
    let mut col = vec![S::zero(); k * p];
    for s in 0..n {
        im2col(&x.data()[s * c * h * wd..][..c * h * wd], c, h, wd, spec, oh, ow, &mut col);
        matmul_acc(w.data(), &col, &mut out[s * m * p..][..m * p], m, k, p);
    }
    if let Some(b) = b {
        for s in 0..n {
            for o in 0..m {
                let bias = b.data()[o];
                for v in &mut out[(s * m + o) * p..][..p] {
                    *v += bias;
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, m, oh, ow], out, AllocCategory::Activation))
}

/// `dX = W^T * dY`: reads only the weights and the output gradient.
pub fn conv2d_backward_input<S: Scalar>(
    dy: &Tensor<S>,
    w: &Tensor<S>,
    spec: &Conv2dSpec,
    input_hw: (usize, usize),
) -> Result<Tensor<S>> {
    let &[n, m, oh, ow] = dy.shape() else {
        return Err(Error::ShapeMismatch(format!("conv2d dY must be NCHW, got {:?}", dy.shape())));
    };
    if m != spec.out_channels || w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch("conv2d backward shapes inconsistent with spec".into()));
    }
    let (h, wd) = input_hw;
    if spec.output_hw(h, wd)? != (oh, ow) {
        return Err(Error::ShapeMismatch(format!(
            "dY spatial {oh}x{ow} does not match input {h}x{wd} under this spec"
        )));
    }
    let c = spec.in_channels;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let k = c * kh * kw;
    let p = oh * ow;
    let mut dx = vec![S::zero(); n * c * h * wd];
    let mut dcol = vec![S::zero(); k * p];
    for s in 0..n {
        dcol.fill(S::zero());
        matmul_tn_acc(w.data(), &dy.data()[s * m * p..][..m * p], &mut dcol, m, k, p);
        // col2im: scatter-add in fixed row order.
        let dst = &mut dx[s * c * h * wd..][..c * h * wd];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &dcol[((ci * kh + ki) * kw + kj) * p..][..p];
                    for oi in 0..oh {
                        let ih = (oi * sh + ki).wrapping_sub(ph);
                        if ih >= h {
                            continue;
                        }
                        for oj in 0..ow {
                            let iw = (oj * sw + kj).wrapping_sub(pw);
                            if iw < wd {
                                dst[(ci * h + ih) * wd + iw] += row[oi * ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, c, h, wd], dx, AllocCategory::Gradient))
}

/// `db[c] = sum over batch and spatial positions of dY[:, c, :, :]`.
pub fn conv2d_backward_bias<S: Scalar>(dy: &Tensor<S>) -> Result<Tensor<S>> {
    let &[n, m, oh, ow] = dy.shape() else {
        return Err(Error::ShapeMismatch(format!("conv2d dY must be NCHW, got {:?}", dy.shape())));
    };
    let p = oh * ow;
    let mut db = vec![S::zero(); m];
    for s in 0..n {
        for o in 0..m {
            let acc = &mut db[o];
            for &v in &dy.data()[(s * m + o) * p..][..p] {
                *acc += v;
            }
        }
    }
    Ok(Tensor::from_vec(vec![m], db, AllocCategory::Gradient))
}

/// `dW = X_saved * dY`, where `X_saved` is whatever stands in for the input:
/// the full activation or an inflated pooled payload.
pub fn conv2d_backward_weight<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    spec: &Conv2dSpec,
) -> Result<Tensor<S>> {
    let &[n, c, h, wd] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("conv2d dW input must be NCHW, got {:?}", x.shape())));
    };
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d dW input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let &[n2, m, oh, ow] = dy.shape() else {
        return Err(Error::ShapeMismatch(format!("conv2d dY must be NCHW, got {:?}", dy.shape())));
    };
    if n2 != n || m != spec.out_channels || spec.output_hw(h, wd)? != (oh, ow) {
        return Err(Error::ShapeMismatch("conv2d dW shapes inconsistent with spec".into()));
    }
    let k = c * spec.kernel.0 * spec.kernel.1;
    let p = oh * ow;
    let mut dw = vec![S::zero(); m * k];
    let mut col_t = vec![S::zero(); p * k];
    for s in 0..n {
        im2col_t(&x.data()[s * c * h * wd..][..c * h * wd], c, h, wd, spec, oh, ow, &mut col_t);
        matmul_acc(&dy.data()[s * m * p..][..m * p], &col_t, &mut dw, m, p, k);
    }
    Ok(Tensor::from_vec(spec.weight_shape().to_vec(), dw, AllocCategory::Gradient))
}
