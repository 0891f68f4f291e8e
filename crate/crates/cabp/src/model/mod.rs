//! Layer graphs: an ordered node list over value ids, with parameters in a
//! [`ParamStore`] and a per-conv save policy resolved at build time.
//!
//! The executor frees forward values as soon as their last consumer ran, so
//! the ledger sees the real lifetime of every intermediate. Whatever a layer
//! needs for backward lives in its tape payload, not in the value store.

pub mod resnet;

use crate::compress::compress;
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::ops::activation::relu_forward;
use crate::ops::batchnorm::{batchnorm2d_forward_eval, batchnorm2d_forward_train};
use crate::ops::conv::conv2d_forward;
use crate::ops::linear::linear_forward;
use crate::ops::pool::{global_avgpool_forward, maxpool2d_forward};
use crate::ops::{Conv2dSpec, SavePolicy};
use crate::scalar::Scalar;
use crate::tape::{OpKind, ParamKind, ParamStore, SavedPayload, Tape, ValueId};
use crate::tensor::{AllocCategory, Tensor};

/// Per-run compression configuration: a default pooling kernel for conv
/// layers, name patterns that stay uncompressed, and exact-name overrides.
///
/// Batch norm, pooling, and linear layers are exempt by construction; the
/// policy is only ever consulted for convolutions.
#[derive(Debug, Clone)]
pub struct CompressionPolicy {
    pub default: SavePolicy,
    /// Exact names, or prefixes ending in `*`.
    pub exempt_patterns: Vec<String>,
    pub overrides: Vec<(String, SavePolicy)>,
}

impl CompressionPolicy {
    /// No compression anywhere.
    pub fn off() -> Self {
        CompressionPolicy {
            default: SavePolicy::Full,
            exempt_patterns: standard_exemptions(),
            overrides: Vec::new(),
        }
    }

    /// Uniform pooling with the stem convolution exempt.
    pub fn uniform(kernel: (usize, usize)) -> Self {
        CompressionPolicy {
            default: SavePolicy::Pooled(kernel),
            exempt_patterns: standard_exemptions(),
            overrides: Vec::new(),
        }
    }

    pub fn resolve(&self, layer_name: &str) -> SavePolicy {
        for (name, policy) in &self.overrides {
            if name == layer_name {
                return *policy;
            }
        }
        for pattern in &self.exempt_patterns {
            if pattern_matches(pattern, layer_name) {
                return SavePolicy::Full;
            }
        }
        self.default
    }

    pub fn describe(&self) -> String {
        self.default.describe()
    }
}

fn standard_exemptions() -> Vec<String> {
    vec!["conv1".to_string()]
}

fn pattern_matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

#[derive(Debug)]
pub struct LayerNode<S: Scalar> {
    pub name: String,
    pub op: OpKind<S>,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

#[derive(Debug)]
pub struct Network<S: Scalar> {
    nodes: Vec<LayerNode<S>>,
    pub params: ParamStore<S>,
    num_values: usize,
}

pub const INPUT_VALUE: ValueId = 0;

impl<S: Scalar> Network<S> {
    pub fn new() -> Self {
        Network { nodes: Vec::new(), params: ParamStore::new(), num_values: 1 }
    }

    pub fn nodes(&self) -> &[LayerNode<S>] {
        &self.nodes
    }

    pub fn output_value(&self) -> ValueId {
        self.nodes.last().map(|n| n.output).unwrap_or(INPUT_VALUE)
    }

    pub fn num_values(&self) -> usize {
        self.num_values
    }

    pub fn add_node(&mut self, name: impl Into<String>, op: OpKind<S>, inputs: Vec<ValueId>) -> ValueId {
        let output = self.num_values;
        self.num_values += 1;
        self.nodes.push(LayerNode { name: name.into(), op, inputs, output });
        output
    }

    pub fn add_conv(
        &mut self,
        name: &str,
        spec: Conv2dSpec,
        policy: SavePolicy,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
        input: ValueId,
        ledger: &mut MemoryLedger,
    ) -> ValueId {
        assert_eq!(weight.shape(), spec.weight_shape());
        let weight = self.params.add(format!("{name}.weight"), weight, ParamKind::Weight, ledger);
        let bias = bias.map(|b| self.params.add(format!("{name}.bias"), b, ParamKind::Weight, ledger));
        self.add_node(name, OpKind::Conv2d { spec, weight, bias, policy }, vec![input])
    }

    pub fn add_batchnorm(
        &mut self,
        name: &str,
        channels: usize,
        gamma_init: S,
        input: ValueId,
        ledger: &mut MemoryLedger,
    ) -> ValueId {
        let gamma = self.params.add(
            format!("{name}.weight"),
            Tensor::full(vec![channels], gamma_init, AllocCategory::Parameter),
            ParamKind::Weight,
            ledger,
        );
        let beta = self.params.add(
            format!("{name}.bias"),
            Tensor::zeros(vec![channels], AllocCategory::Parameter),
            ParamKind::Weight,
            ledger,
        );
        let running_mean = self.params.add(
            format!("{name}.running_mean"),
            Tensor::zeros(vec![channels], AllocCategory::Parameter),
            ParamKind::Buffer,
            ledger,
        );
        let running_var = self.params.add(
            format!("{name}.running_var"),
            Tensor::full(vec![channels], S::one(), AllocCategory::Parameter),
            ParamKind::Buffer,
            ledger,
        );
        self.add_node(
            name,
            OpKind::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum: crate::ops::batchnorm::DEFAULT_MOMENTUM,
                eps: crate::ops::batchnorm::DEFAULT_EPS,
            },
            vec![input],
        )
    }

    pub fn add_linear(
        &mut self,
        name: &str,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
        input: ValueId,
        ledger: &mut MemoryLedger,
    ) -> ValueId {
        let weight = self.params.add(format!("{name}.weight"), weight, ParamKind::Weight, ledger);
        let bias = bias.map(|b| self.params.add(format!("{name}.bias"), b, ParamKind::Weight, ledger));
        self.add_node(name, OpKind::Linear { weight, bias }, vec![input])
    }

    /// Weight parameters of conv and linear layers, in network order. This is
    /// the set the gradient-similarity reports cover.
    pub fn weight_param_ids(&self) -> Vec<(String, crate::tape::ParamId)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                OpKind::Conv2d { weight, .. } | OpKind::Linear { weight, .. } => {
                    Some((n.name.clone(), *weight))
                }
                _ => None,
            })
            .collect()
    }

    /// Conv layers with their resolved save policy, for audits and reports.
    pub fn conv_policies(&self) -> Vec<(String, SavePolicy)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                OpKind::Conv2d { policy, .. } => Some((n.name.clone(), *policy)),
                _ => None,
            })
            .collect()
    }

    /// Shapes of every value for a given batch and input size. Fails when a
    /// residual join sees mismatched operands, so builders catch bad graphs
    /// before any tensor exists.
    pub fn infer_value_shapes(
        &self,
        batch: usize,
        input_chw: (usize, usize, usize),
    ) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; self.num_values];
        shapes[INPUT_VALUE] = Some(vec![batch, input_chw.0, input_chw.1, input_chw.2]);
        for node in &self.nodes {
            let get = |v: ValueId| -> Result<&Vec<usize>> {
                shapes[v]
                    .as_ref()
                    .ok_or_else(|| Error::ShapeMismatch(format!("value {v} used before defined")))
            };
            let out = match &node.op {
                OpKind::Conv2d { spec, .. } => {
                    let s = get(node.inputs[0])?;
                    if s[1] != spec.in_channels {
                        return Err(Error::ShapeMismatch(format!(
                            "'{}' expects {} input channels, got {}",
                            node.name, spec.in_channels, s[1]
                        )));
                    }
                    let (oh, ow) = spec.output_hw(s[2], s[3])?;
                    vec![s[0], spec.out_channels, oh, ow]
                }
                OpKind::BatchNorm2d { .. } | OpKind::Relu | OpKind::Scale(_) | OpKind::Compare => {
                    get(node.inputs[0])?.clone()
                }
                OpKind::MaxPool2d { kernel, stride, padding } => {
                    let s = get(node.inputs[0])?;
                    let oh = (s[2] + 2 * padding.0 - kernel.0) / stride.0 + 1;
                    let ow = (s[3] + 2 * padding.1 - kernel.1) / stride.1 + 1;
                    vec![s[0], s[1], oh, ow]
                }
                OpKind::GlobalAvgPool => {
                    let s = get(node.inputs[0])?;
                    vec![s[0], s[1]]
                }
                OpKind::Linear { weight, .. } => {
                    let s = get(node.inputs[0])?;
                    let w = self.params.value(*weight);
                    if s[1] != w.shape()[1] {
                        return Err(Error::ShapeMismatch(format!(
                            "'{}' expects {} input features, got {}",
                            node.name,
                            w.shape()[1],
                            s[1]
                        )));
                    }
                    vec![s[0], w.shape()[0]]
                }
                OpKind::Add | OpKind::Mul => {
                    let a = get(node.inputs[0])?.clone();
                    let b = get(node.inputs[1])?;
                    if &a != b {
                        return Err(Error::ShapeMismatch(format!(
                            "'{}' joins mismatched shapes {:?} and {:?}",
                            node.name, a, b
                        )));
                    }
                    a
                }
                OpKind::SumAll => vec![],
                OpKind::MaxReduce { axis } => {
                    let mut s = get(node.inputs[0])?.clone();
                    if *axis >= s.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "'{}' reduces axis {axis} of rank-{} value",
                            node.name,
                            s.len()
                        )));
                    }
                    s.remove(*axis);
                    s
                }
                OpKind::SoftmaxCrossEntropy => {
                    return Err(Error::ShapeMismatch(
                        "cross entropy is recorded by the training loop, not as a layer".into(),
                    ))
                }
            };
            shapes[node.output] = Some(out);
        }
        Ok(shapes.into_iter().map(|s| s.unwrap_or_default()).collect())
    }

    /// Training-mode forward: computes exact outputs, records one tape node
    /// per layer with its save payload, updates batch-norm running stats, and
    /// retires forward values after their last consumer.
    pub fn forward_train(
        &mut self,
        input: &Tensor<S>,
        tape: &mut Tape<S>,
        ledger: &mut MemoryLedger,
    ) -> Result<Tensor<S>> {
        self.forward_impl(input, Some((tape, ledger)))
    }

    /// Inference-mode forward: running statistics, no tape, no ledger.
    pub fn forward_eval(&mut self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_impl(input, None)
    }

    fn forward_impl(
        &mut self,
        input: &Tensor<S>,
        mut recording: Option<(&mut Tape<S>, &mut MemoryLedger)>,
    ) -> Result<Tensor<S>> {
        let mut remaining = vec![0usize; self.num_values];
        for node in &self.nodes {
            for &v in &node.inputs {
                remaining[v] += 1;
            }
        }
        let output_value = self.output_value();
        remaining[output_value] += 1; // the caller consumes the output

        let mut values: Vec<Option<Tensor<S>>> = vec![None; self.num_values];
        values[INPUT_VALUE] = Some(input.clone());

        for idx in 0..self.nodes.len() {
            let (out, payload) = self.execute_node(idx, &values, recording.is_some())?;
            let node = &self.nodes[idx];
            if let Some((tape, ledger)) = recording.as_mut() {
                ledger.alloc(AllocCategory::Activation, out.byte_size(), format!("value:{}", node.name));
                tape.record(node.name.clone(), node.op.clone(), node.inputs.clone(), payload, node.output, ledger);
            }
            values[node.output] = Some(out);
            for &v in &node.inputs.clone() {
                remaining[v] -= 1;
                if remaining[v] == 0 && v != INPUT_VALUE {
                    let t = values[v].take().expect("value still live");
                    if let Some((_, ledger)) = recording.as_mut() {
                        let producer = &self.nodes.iter().find(|n| n.output == v).expect("producer").name;
                        ledger.free(AllocCategory::Activation, t.byte_size(), format!("value:{producer}"))?;
                    }
                }
            }
        }
        Ok(values[output_value].take().expect("network output"))
    }

    fn execute_node(
        &mut self,
        idx: usize,
        values: &[Option<Tensor<S>>],
        training: bool,
    ) -> Result<(Tensor<S>, SavedPayload<S>)> {
        let node = &self.nodes[idx];
        let arg = |i: usize| -> &Tensor<S> {
            values[node.inputs[i]].as_ref().expect("input value live")
        };
        let (out, payload, bn_update) = match &node.op {
            OpKind::Conv2d { spec, weight, bias, policy } => {
                let x = arg(0);
                let y = conv2d_forward(x, self.params.value(*weight), bias.map(|b| self.params.value(b)), spec)?;
                let payload = if training {
                    match policy {
                        SavePolicy::Full => SavedPayload::Full(x.clone()),
                        SavePolicy::Pooled(k) => SavedPayload::Pooled(compress(x, *k)?),
                    }
                } else {
                    SavedPayload::None
                };
                (y, payload, None)
            }
            OpKind::BatchNorm2d { gamma, beta, running_mean, running_var, momentum, eps } => {
                let x = arg(0);
                if training {
                    let out = batchnorm2d_forward_train(
                        x,
                        self.params.value(*gamma),
                        self.params.value(*beta),
                        self.params.value(*running_mean),
                        self.params.value(*running_var),
                        *momentum,
                        *eps,
                    )?;
                    let payload = SavedPayload::BatchNorm {
                        input: x.clone(),
                        mean: out.mean,
                        inv_std: out.inv_std,
                    };
                    (
                        out.y,
                        payload,
                        Some((*running_mean, out.new_running_mean, *running_var, out.new_running_var)),
                    )
                } else {
                    let y = batchnorm2d_forward_eval(
                        x,
                        self.params.value(*gamma),
                        self.params.value(*beta),
                        self.params.value(*running_mean),
                        self.params.value(*running_var),
                        *eps,
                    )?;
                    (y, SavedPayload::None, None)
                }
            }
            OpKind::Relu => {
                let x = arg(0);
                let (y, mask) = relu_forward(x);
                let payload = if training {
                    SavedPayload::Mask { mask, shape: x.shape().to_vec() }
                } else {
                    SavedPayload::None
                };
                (y, payload, None)
            }
            OpKind::MaxPool2d { kernel, stride, padding } => {
                let x = arg(0);
                let (y, indices) = maxpool2d_forward(x, *kernel, *stride, *padding)?;
                let payload = if training {
                    let s = x.shape();
                    SavedPayload::PoolIndices { indices, input_shape: [s[0], s[1], s[2], s[3]] }
                } else {
                    SavedPayload::None
                };
                (y, payload, None)
            }
            OpKind::GlobalAvgPool => {
                let x = arg(0);
                let y = global_avgpool_forward(x)?;
                let payload = if training {
                    SavedPayload::Shape(x.shape().to_vec())
                } else {
                    SavedPayload::None
                };
                (y, payload, None)
            }
            OpKind::Linear { weight, bias } => {
                let x = arg(0);
                let y = linear_forward(x, self.params.value(*weight), bias.map(|b| self.params.value(b)))?;
                let payload =
                    if training { SavedPayload::Full(x.clone()) } else { SavedPayload::None };
                (y, payload, None)
            }
            OpKind::Add => (arg(0).add(arg(1))?, SavedPayload::None, None),
            OpKind::Mul => {
                let (a, b) = (arg(0), arg(1));
                let payload = if training {
                    SavedPayload::Pair(a.clone(), b.clone())
                } else {
                    SavedPayload::None
                };
                (a.mul(b)?, payload, None)
            }
            OpKind::Scale(f) => (arg(0).scale(*f), SavedPayload::None, None),
            OpKind::SumAll => {
                let x = arg(0);
                let payload = if training {
                    SavedPayload::Shape(x.shape().to_vec())
                } else {
                    SavedPayload::None
                };
                (Tensor::scalar(x.sum_all(), AllocCategory::Activation), payload, None)
            }
            OpKind::MaxReduce { axis } => {
                let x = arg(0);
                let (y, indices) = x.max_axis_argmax(*axis)?;
                let payload = if training {
                    SavedPayload::AxisArgmax {
                        indices,
                        input_shape: x.shape().to_vec(),
                        axis: *axis,
                    }
                } else {
                    SavedPayload::None
                };
                (y, payload, None)
            }
            OpKind::Compare => (arg(0).ge_mask(arg(1))?, SavedPayload::None, None),
            OpKind::SoftmaxCrossEntropy => {
                return Err(Error::ShapeMismatch(
                    "cross entropy is recorded by the training loop, not as a layer".into(),
                ))
            }
        };
        if let Some((rm_id, rm, rv_id, rv)) = bn_update {
            self.params.set_value(rm_id, rm);
            self.params.set_value(rv_id, rv);
        }
        Ok((out, payload))
    }
}

impl<S: Scalar> Default for Network<S> {
    fn default() -> Self {
        Network::new()
    }
}
