//! Softmax cross-entropy, averaged over the batch.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

/// Returns the scalar loss and the softmax probabilities saved for backward.
pub fn softmax_cross_entropy_forward<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[u32],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let &[n, c] = logits.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy expects (N, C) logits, got {:?}",
            logits.shape()
        )));
    };
    if n == 0 || c == 0 {
        return Err(Error::ShapeMismatch("cross entropy over empty batch or classes".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let mut probs = vec![S::zero(); n * c];
    let mut loss = 0.0f64;
    for s in 0..n {
        let label = labels[s];
        if label as usize >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &logits.data()[s * c..][..c];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max).to_f64_lossy();
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64_lossy() - max).exp();
        }
        let log_z = max + denom.ln();
        for (p, &v) in probs[s * c..][..c].iter_mut().zip(row.iter()) {
            *p = S::from_f64_lossy((v.to_f64_lossy() - log_z).exp());
        }
        loss += log_z - row[label as usize].to_f64_lossy();
    }
    loss /= n as f64;
    Ok((
        Tensor::scalar(S::from_f64_lossy(loss), AllocCategory::Activation),
        Tensor::from_vec(vec![n, c], probs, AllocCategory::Activation),
    ))
}

/// `d loss / d logits = (p - onehot(label)) / N`, scaled by the upstream
/// scalar gradient.
pub fn softmax_cross_entropy_backward<S: Scalar>(
    probs: &Tensor<S>,
    labels: &[u32],
    upstream: S,
) -> Result<Tensor<S>> {
    let &[n, c] = probs.shape() else {
        return Err(Error::ShapeMismatch("cross entropy probs must be (N, C)".into()));
    };
    let scale = upstream / S::from_usize(n).unwrap();
    let mut dl = vec![S::zero(); n * c];
    for s in 0..n {
        let label = labels[s] as usize;
        let ps = &probs.data()[s * c..][..c];
        let ds = &mut dl[s * c..][..c];
        for (i, (d, &p)) in ds.iter_mut().zip(ps.iter()).enumerate() {
            let target = if i == label { S::one() } else { S::zero() };
            *d = (p - target) * scale;
        }
    }
    Ok(Tensor::from_vec(vec![n, c], dl, AllocCategory::Gradient))
}
