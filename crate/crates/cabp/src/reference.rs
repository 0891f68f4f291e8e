//! Naive nested-loop convolution routines.
//!
//! These are the correctness reference for the im2col kernels: slow, obvious,
//! and with the same per-element accumulation order (reduction index
//! ascending, zero contributions from padding included), so the fast path
//! must match them bit for bit. Tests lean on that; production code never
//! calls these.

use crate::ops::conv::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

pub fn conv2d_forward_ref<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    spec: &Conv2dSpec,
) -> Tensor<S> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = spec.output_hw(h, wd).expect("valid output size");
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let m = spec.out_channels;
    let mut out = vec![S::zero(); n * m * oh * ow];
    for s in 0..n {
        for o in 0..m {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = S::zero();
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * sh + ki).wrapping_sub(ph);
                                let iw = (oj * sw + kj).wrapping_sub(pw);
                                let xv = if ih < h && iw < wd {
                                    x.data()[((s * c + ci) * h + ih) * wd + iw]
                                } else {
                                    S::zero()
                                };
                                acc += xv * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc += b.data()[o];
                    }
                    out[((s * m + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, m, oh, ow], out, AllocCategory::Activation)
}

pub fn conv2d_backward_weight_ref<S: Scalar>(
    x: &Tensor<S>,
    dy: &Tensor<S>,
    spec: &Conv2dSpec,
) -> Tensor<S> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oh, ow] = [dy.shape()[2], dy.shape()[3]];
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let m = spec.out_channels;
    let mut dw = vec![S::zero(); m * c * kh * kw];
    for o in 0..m {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut acc = S::zero();
                    for s in 0..n {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let ih = (oi * sh + ki).wrapping_sub(ph);
                                let iw = (oj * sw + kj).wrapping_sub(pw);
                                let xv = if ih < h && iw < wd {
                                    x.data()[((s * c + ci) * h + ih) * wd + iw]
                                } else {
                                    S::zero()
                                };
                                acc += dy.data()[((s * m + o) * oh + oi) * ow + oj] * xv;
                            }
                        }
                    }
                    dw[((o * c + ci) * kh + ki) * kw + kj] = acc;
                }
            }
        }
    }
    Tensor::from_vec(spec.weight_shape().to_vec(), dw, AllocCategory::Gradient)
}

pub fn conv2d_backward_input_ref<S: Scalar>(
    dy: &Tensor<S>,
    w: &Tensor<S>,
    spec: &Conv2dSpec,
    input_hw: (usize, usize),
) -> Tensor<S> {
    let [n, m, oh, ow] = [dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]];
    let (h, wd) = input_hw;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let c = spec.in_channels;
    let mut dx = vec![S::zero(); n * c * h * wd];
    for s in 0..n {
        for o in 0..m {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dy.data()[((s * m + o) * oh + oi) * ow + oj];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oi * sh + ki).wrapping_sub(ph);
                                let iw = (oj * sw + kj).wrapping_sub(pw);
                                if ih < h && iw < wd {
                                    dx[((s * c + ci) * h + ih) * wd + iw] +=
                                        g * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, wd], dx, AllocCategory::Gradient)
}
