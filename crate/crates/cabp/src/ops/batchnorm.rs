//! Batch normalization over NCHW, per-channel.
//!
//! Training normalizes with biased per-batch statistics and maintains
//! running averages (unbiased variance) for inference. The saved payload is
//! the full input plus the batch statistics; these layers are never pooled.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

pub struct BnTrainOutput<S: Scalar> {
    pub y: Tensor<S>,
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
    pub new_running_mean: Tensor<S>,
    pub new_running_var: Tensor<S>,
}

fn check_nchw<S: Scalar>(x: &Tensor<S>, channels: usize) -> Result<[usize; 4]> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("batch norm expects NCHW, got {:?}", x.shape())));
    };
    if c != channels {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {channels} channels got input with {c}"
        )));
    }
    if n * h * w < 2 {
        return Err(Error::ShapeMismatch(
            "batch norm needs at least two values per channel".into(),
        ));
    }
    Ok([n, c, h, w])
}

pub fn batchnorm2d_forward_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: f64,
    eps: f64,
) -> Result<BnTrainOutput<S>> {
    let [n, c, h, w] = check_nchw(x, gamma.len())?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![S::zero(); c];
    let mut inv_std = vec![S::zero(); c];
    let mut new_rm = vec![S::zero(); c];
    let mut new_rv = vec![S::zero(); c];
    let mut out = vec![S::zero(); x.len()];
    for ci in 0..c {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for s in 0..n {
            for &v in &x.data()[((s * c) + ci) * plane..][..plane] {
                let v = v.to_f64_lossy();
                sum += v;
                sum_sq += v * v;
            }
        }
        let mu = sum / m;
        let var = (sum_sq / m - mu * mu).max(0.0);
        let istd = 1.0 / (var + eps).sqrt();
        mean[ci] = S::from_f64_lossy(mu);
        inv_std[ci] = S::from_f64_lossy(istd);
        let rm = running_mean.data()[ci].to_f64_lossy();
        let rv = running_var.data()[ci].to_f64_lossy();
        let unbiased = var * m / (m - 1.0);
        new_rm[ci] = S::from_f64_lossy((1.0 - momentum) * rm + momentum * mu);
        new_rv[ci] = S::from_f64_lossy((1.0 - momentum) * rv + momentum * unbiased);
        // Per-element math stays in S; only the statistics accumulate in f64.
        let scale = S::from_f64_lossy(istd * gamma.data()[ci].to_f64_lossy());
        let shift = S::from_f64_lossy(
            beta.data()[ci].to_f64_lossy() - mu * istd * gamma.data()[ci].to_f64_lossy(),
        );
        for s in 0..n {
            let src = &x.data()[((s * c) + ci) * plane..][..plane];
            let dst = &mut out[((s * c) + ci) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = v * scale + shift;
            }
        }
    }
    Ok(BnTrainOutput {
        y: Tensor::from_vec(x.shape().to_vec(), out, AllocCategory::Activation),
        mean,
        inv_std,
        new_running_mean: Tensor::from_vec(vec![c], new_rm, AllocCategory::Parameter),
        new_running_var: Tensor::from_vec(vec![c], new_rv, AllocCategory::Parameter),
    })
}

pub fn batchnorm2d_forward_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let [n, c, h, w] = check_nchw(x, gamma.len())?;
    let plane = h * w;
    let mut out = vec![S::zero(); x.len()];
    for ci in 0..c {
        let mu = running_mean.data()[ci].to_f64_lossy();
        let istd = 1.0 / (running_var.data()[ci].to_f64_lossy() + eps).sqrt();
        let g = gamma.data()[ci].to_f64_lossy();
        let b = beta.data()[ci].to_f64_lossy();
        let scale = S::from_f64_lossy(istd * g);
        let shift = S::from_f64_lossy(b - mu * istd * g);
        for s in 0..n {
            let src = &x.data()[((s * c) + ci) * plane..][..plane];
            let dst = &mut out[((s * c) + ci) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = v * scale + shift;
            }
        }
    }
    Ok(Tensor::from_vec(x.shape().to_vec(), out, AllocCategory::Activation))
}

/// Returns `(dx, dgamma, dbeta)` for training-mode batch norm.
pub fn batchnorm2d_backward<S: Scalar>(
    x: &Tensor<S>,
    mean: &[S],
    inv_std: &[S],
    gamma: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [n, c, h, w] = check_nchw(x, gamma.len())?;
    if dy.shape() != x.shape() {
        return Err(Error::ShapeMismatch("batch norm dY shape differs from input".into()));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ci in 0..c {
        let mu = mean[ci].to_f64_lossy();
        let istd = inv_std[ci].to_f64_lossy();
        let g = gamma.data()[ci].to_f64_lossy();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            let xs = &x.data()[((s * c) + ci) * plane..][..plane];
            let gs = &dy.data()[((s * c) + ci) * plane..][..plane];
            for (&xv, &gv) in xs.iter().zip(gs.iter()) {
                let xhat = (xv.to_f64_lossy() - mu) * istd;
                let gvf = gv.to_f64_lossy();
                sum_dy += gvf;
                sum_dy_xhat += gvf * xhat;
            }
        }
        dgamma[ci] = S::from_f64_lossy(sum_dy_xhat);
        dbeta[ci] = S::from_f64_lossy(sum_dy);
        let k1 = sum_dy / m;
        let k2 = sum_dy_xhat / m;
        // dx = g*istd*(dy - k1 - xhat*k2) rewritten with S-typed constants:
        // dx = a*dy + b*x + c with a = g*istd, b = -g*istd^2*k2,
        // c = g*istd*(mu*istd*k2 - k1).
        let a = S::from_f64_lossy(g * istd);
        let b = S::from_f64_lossy(-g * istd * istd * k2);
        let cc = S::from_f64_lossy(g * istd * (mu * istd * k2 - k1));
        for s in 0..n {
            let xs = &x.data()[((s * c) + ci) * plane..][..plane];
            let gs = &dy.data()[((s * c) + ci) * plane..][..plane];
            let ds = &mut dx[((s * c) + ci) * plane..][..plane];
            for ((d, &xv), &gv) in ds.iter_mut().zip(xs.iter()).zip(gs.iter()) {
                *d = a * gv + b * xv + cc;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx, AllocCategory::Gradient),
        Tensor::from_vec(vec![c], dgamma, AllocCategory::Gradient),
        Tensor::from_vec(vec![c], dbeta, AllocCategory::Gradient),
    ))
}
