//! Fully connected layer: `y = x W^T + b` with `x (N, F)` and `W (C, F)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

fn check<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let &[n, f] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("linear expects (N, F) input, got {:?}", x.shape())));
    };
    let &[c, fw] = w.shape() else {
        return Err(Error::ShapeMismatch(format!("linear weight must be (C, F), got {:?}", w.shape())));
    };
    if f != fw {
        return Err(Error::ShapeMismatch(format!(
            "linear input features {f} do not match weight features {fw}"
        )));
    }
    Ok((n, f, c))
}

pub fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (n, f, c) = check(x, w)?;
    let mut out = vec![S::zero(); n * c];
    for s in 0..n {
        let xs = &x.data()[s * f..][..f];
        for o in 0..c {
            let ws = &w.data()[o * f..][..f];
            let mut acc = S::zero();
            for (&xv, &wv) in xs.iter().zip(ws.iter()) {
                acc += xv * wv;
            }
            if let Some(b) = b {
                acc += b.data()[o];
            }
            out[s * c + o] = acc;
        }
    }
    Ok(Tensor::from_vec(vec![n, c], out, AllocCategory::Activation))
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    with_bias: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (n, f, c) = check(x, w)?;
    if dy.shape() != [n, c] {
        return Err(Error::ShapeMismatch("linear dY must be (N, C)".into()));
    }
    let mut dx = vec![S::zero(); n * f];
    for s in 0..n {
        let dst = &mut dx[s * f..][..f];
        for o in 0..c {
            let g = dy.data()[s * c + o];
            let ws = &w.data()[o * f..][..f];
            for (d, &wv) in dst.iter_mut().zip(ws.iter()) {
                *d += g * wv;
            }
        }
    }
    let mut dw = vec![S::zero(); c * f];
    for s in 0..n {
        let xs = &x.data()[s * f..][..f];
        for o in 0..c {
            let g = dy.data()[s * c + o];
            let dst = &mut dw[o * f..][..f];
            for (d, &xv) in dst.iter_mut().zip(xs.iter()) {
                *d += g * xv;
            }
        }
    }
    let db = if with_bias {
        let mut db = vec![S::zero(); c];
        for s in 0..n {
            for o in 0..c {
                db[o] += dy.data()[s * c + o];
            }
        }
        Some(Tensor::from_vec(vec![c], db, AllocCategory::Gradient))
    } else {
        None
    };
    Ok((
        Tensor::from_vec(vec![n, f], dx, AllocCategory::Gradient),
        Tensor::from_vec(vec![c, f], dw, AllocCategory::Gradient),
        db,
    ))
}
