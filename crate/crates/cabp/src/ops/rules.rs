//! Backward rules for every recordable op, registered by op id.
//!
//! The convolution rule is where the compression scheme lives: input and
//! bias gradients come straight from the weights and the output gradient,
//! while the weight gradient reads the saved payload, inflating a pooled
//! payload back to the original dimensions first.

use crate::compress::inflate;
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::ops::activation::relu_backward;
use crate::ops::batchnorm::batchnorm2d_backward;
use crate::ops::conv::{conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, SavePolicy};
use crate::ops::linear::linear_backward;
use crate::ops::loss::softmax_cross_entropy_backward;
use crate::ops::pool::{global_avgpool_backward, maxpool2d_backward};
use crate::scalar::Scalar;
use crate::tape::{NodeGrads, OpKind, ParamStore, RuleSet, SavedPayload, TapeNode};
use crate::tensor::{AllocCategory, Tensor};

fn payload_error<T>(node_name: &str, op: &str) -> Result<T> {
    Err(Error::ShapeMismatch(format!(
        "node '{node_name}' has a payload unsuitable for op '{op}'"
    )))
}

fn conv_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    params: &ParamStore<S>,
    ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let OpKind::Conv2d { spec, weight, bias, policy } = &node.op else {
        return payload_error(&node.name, "conv2d");
    };
    let w = params.value(*weight);
    // Only shape metadata is read here; dX must never depend on the saved
    // activation values.
    let input_hw = match &node.saved {
        SavedPayload::Full(x) => (x.shape()[2], x.shape()[3]),
        SavedPayload::Pooled(c) => {
            let [_, _, h, wd] = c.original_shape();
            (h, wd)
        }
        _ => return payload_error(&node.name, "conv2d"),
    };
    let dx = conv2d_backward_input(grad_out, w, spec, input_hw)?;
    let mut param_grads = Vec::with_capacity(2);
    if let Some(bias) = bias {
        param_grads.push((*bias, conv2d_backward_bias(grad_out)?));
    }
    let dw = match &node.saved {
        SavedPayload::Full(x) => conv2d_backward_weight(x, grad_out, spec)?,
        SavedPayload::Pooled(c) => {
            if let SavePolicy::Pooled(k) = policy {
                if c.kernel() != *k {
                    return Err(Error::ShapeMismatch(format!(
                        "node '{}' stored a {:?}-pooled activation but its policy says {:?}",
                        node.name,
                        c.kernel(),
                        k
                    )));
                }
            }
            let [n, ci, h, wd] = c.original_shape();
            let bytes = (n * ci * h * wd * std::mem::size_of::<S>()) as u64;
            ledger.alloc(AllocCategory::Scratch, bytes, format!("inflate:{}", node.name));
            let x = inflate(c);
            let dw = conv2d_backward_weight(&x, grad_out, spec)?;
            drop(x);
            ledger.free(AllocCategory::Scratch, bytes, format!("inflate:{}", node.name))?;
            dw
        }
        _ => unreachable!("checked above"),
    };
    param_grads.push((*weight, dw));
    Ok(NodeGrads { inputs: vec![Some(dx)], params: param_grads })
}

fn batchnorm_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let OpKind::BatchNorm2d { gamma, beta, .. } = &node.op else {
        return payload_error(&node.name, "batchnorm2d");
    };
    let SavedPayload::BatchNorm { input, mean, inv_std } = &node.saved else {
        return payload_error(&node.name, "batchnorm2d");
    };
    let (dx, dgamma, dbeta) = batchnorm2d_backward(input, mean, inv_std, params.value(*gamma), grad_out)?;
    Ok(NodeGrads { inputs: vec![Some(dx)], params: vec![(*gamma, dgamma), (*beta, dbeta)] })
}

fn relu_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::Mask { mask, shape } = &node.saved else {
        return payload_error(&node.name, "relu");
    };
    Ok(NodeGrads { inputs: vec![Some(relu_backward(mask, shape, grad_out)?)], params: vec![] })
}

fn maxpool_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::PoolIndices { indices, input_shape } = &node.saved else {
        return payload_error(&node.name, "maxpool2d");
    };
    Ok(NodeGrads {
        inputs: vec![Some(maxpool2d_backward(indices, *input_shape, grad_out)?)],
        params: vec![],
    })
}

fn gap_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::Shape(shape) = &node.saved else {
        return payload_error(&node.name, "global_avgpool");
    };
    Ok(NodeGrads { inputs: vec![Some(global_avgpool_backward(shape, grad_out)?)], params: vec![] })
}

fn linear_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let OpKind::Linear { weight, bias } = &node.op else {
        return payload_error(&node.name, "linear");
    };
    let SavedPayload::Full(x) = &node.saved else {
        return payload_error(&node.name, "linear");
    };
    let (dx, dw, db) = linear_backward(x, params.value(*weight), grad_out, bias.is_some())?;
    let mut param_grads = vec![(*weight, dw)];
    if let (Some(bias), Some(db)) = (bias, db) {
        param_grads.push((*bias, db));
    }
    Ok(NodeGrads { inputs: vec![Some(dx)], params: param_grads })
}

fn cross_entropy_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::Probs { probs, labels } = &node.saved else {
        return payload_error(&node.name, "softmax_cross_entropy");
    };
    let upstream = grad_out.data()[0];
    Ok(NodeGrads {
        inputs: vec![Some(softmax_cross_entropy_backward(probs, labels, upstream)?)],
        params: vec![],
    })
}

fn add_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    Ok(NodeGrads {
        inputs: node.inputs.iter().map(|_| Some(grad_out.clone())).collect(),
        params: vec![],
    })
}

fn mul_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::Pair(a, b) = &node.saved else {
        return payload_error(&node.name, "mul");
    };
    Ok(NodeGrads {
        inputs: vec![Some(grad_out.mul(b)?), Some(grad_out.mul(a)?)],
        params: vec![],
    })
}

fn scale_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let OpKind::Scale(factor) = &node.op else {
        return payload_error(&node.name, "scale");
    };
    Ok(NodeGrads { inputs: vec![Some(grad_out.scale(*factor))], params: vec![] })
}

fn sum_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::Shape(shape) = &node.saved else {
        return payload_error(&node.name, "sum");
    };
    Ok(NodeGrads {
        inputs: vec![Some(Tensor::full(shape.clone(), grad_out.data()[0], AllocCategory::Gradient))],
        params: vec![],
    })
}

fn max_reduce_rule<S: Scalar>(
    node: &TapeNode<S>,
    grad_out: &Tensor<S>,
    _params: &ParamStore<S>,
    _ledger: &mut MemoryLedger,
) -> Result<NodeGrads<S>> {
    let SavedPayload::AxisArgmax { indices, input_shape, axis } = &node.saved else {
        return payload_error(&node.name, "max_reduce");
    };
    let inner: usize = input_shape[axis + 1..].iter().product();
    let mid = input_shape[*axis];
    let mut dx = Tensor::zeros(input_shape.clone(), AllocCategory::Gradient);
    {
        let data = dx.data_mut();
        for (flat, (&g, &winner)) in grad_out.data().iter().zip(indices.iter()).enumerate() {
            let o = flat / inner;
            let i = flat % inner;
            data[(o * mid + winner as usize) * inner + i] += g;
        }
    }
    Ok(NodeGrads { inputs: vec![Some(dx)], params: vec![] })
}

/// All standard rules. `compare` is intentionally absent: it has no gradient,
/// and asking for one reports the op by name.
pub fn standard_rules<S: Scalar>() -> RuleSet<S> {
    let mut rules = RuleSet::empty();
    rules.register("conv2d", conv_rule);
    rules.register("batchnorm2d", batchnorm_rule);
    rules.register("relu", relu_rule);
    rules.register("maxpool2d", maxpool_rule);
    rules.register("global_avgpool", gap_rule);
    rules.register("linear", linear_rule);
    rules.register("softmax_cross_entropy", cross_entropy_rule);
    rules.register("add", add_rule);
    rules.register("mul", mul_rule);
    rules.register("scale", scale_rule);
    rules.register("sum", sum_rule);
    rules.register("max_reduce", max_reduce_rule);
    rules
}
