//! Reverse-mode differentiation tape.
//!
//! Layers record one node per forward operation: the op description, the
//! value ids it connects, and the payload saved for the backward pass.
//! [`Tape::backward`] replays nodes in exact reverse order, dispatching each
//! to a backward rule looked up by op id, accumulating gradients across
//! fan-out by addition, and releasing every saved payload as it goes.
//!
//! Backward consumes the tape, so recording after backward is ruled out by
//! construction rather than checked at runtime.

use std::collections::HashMap;

use crate::compress::{compressed_bytes, CompressedActivation};
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::ops::conv::{Conv2dSpec, SavePolicy};
use crate::scalar::Scalar;
use crate::tensor::{AllocCategory, Tensor};

/// Index of an activation value flowing through the graph.
pub type ValueId = usize;
/// Index into a [`ParamStore`].
pub type ParamId = usize;

/// Whether a stored entry is trained or just carried along (BN statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub kind: ParamKind,
    pub grad: Option<Tensor<S>>,
}

/// Named parameter and buffer tensors in registration order, with their
/// accumulated gradients.
#[derive(Debug, Default)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<S>,
        kind: ParamKind,
        ledger: &mut MemoryLedger,
    ) -> ParamId {
        let name = name.into();
        ledger.alloc(AllocCategory::Parameter, tensor.byte_size(), format!("param:{name}"));
        self.entries.push(ParamEntry { name, tensor, kind, grad: None });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    /// Replaces a tensor in place (optimizer update, BN statistics).
    pub fn set_value(&mut self, id: ParamId, tensor: Tensor<S>) {
        debug_assert_eq!(self.entries[id].tensor.shape(), tensor.shape());
        self.entries[id].tensor = tensor;
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.entries[id].grad.as_ref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: Tensor<S>, ledger: &mut MemoryLedger) -> Result<()> {
        let entry = &mut self.entries[id];
        if entry.tensor.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                grad.shape(),
                entry.name,
                entry.tensor.shape()
            )));
        }
        match &mut entry.grad {
            Some(existing) => *existing = existing.add(&grad)?,
            None => {
                ledger.alloc(AllocCategory::Gradient, grad.byte_size(), format!("grad:{}", entry.name));
                entry.grad = Some(grad);
            }
        }
        Ok(())
    }

    /// Drops all gradients, returning their bytes to the ledger.
    pub fn clear_grads(&mut self, ledger: &mut MemoryLedger) -> Result<()> {
        for entry in &mut self.entries {
            if let Some(g) = entry.grad.take() {
                ledger.free(AllocCategory::Gradient, g.byte_size(), format!("grad:{}", entry.name))?;
            }
        }
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].kind == ParamKind::Weight).collect()
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.byte_size())
            .sum()
    }
}

/// Everything a node may stash for its backward rule.
#[derive(Debug, Clone)]
pub enum SavedPayload<S: Scalar> {
    None,
    /// Full activation, shared with the forward value.
    Full(Tensor<S>),
    /// Average-pooled activation in place of the full one.
    Pooled(CompressedActivation<S>),
    /// ReLU sign mask, one byte per element.
    Mask { mask: Vec<u8>, shape: Vec<usize> },
    /// Max-pool argmax positions (flat h*W+w per output element).
    PoolIndices { indices: Vec<u32>, input_shape: [usize; 4] },
    /// Batch-norm input together with the batch statistics used.
    BatchNorm { input: Tensor<S>, mean: Vec<S>, inv_std: Vec<S> },
    /// Softmax probabilities and the labels they were scored against.
    Probs { probs: Tensor<S>, labels: Vec<u32> },
    /// Shape metadata only (global average pool, sum).
    Shape(Vec<usize>),
    /// Both operands of an elementwise product.
    Pair(Tensor<S>, Tensor<S>),
    /// Argmax positions of an axis reduction.
    AxisArgmax { indices: Vec<u32>, input_shape: Vec<usize>, axis: usize },
}

impl<S: Scalar> SavedPayload<S> {
    /// Logical byte cost of keeping this payload until backward.
    pub fn byte_size(&self) -> u64 {
        let elem = std::mem::size_of::<S>() as u64;
        match self {
            SavedPayload::None | SavedPayload::Shape(_) => 0,
            SavedPayload::Full(t) => t.byte_size(),
            SavedPayload::Pooled(c) => compressed_bytes(c),
            SavedPayload::Mask { mask, .. } => mask.len() as u64,
            SavedPayload::PoolIndices { indices, .. } => indices.len() as u64 * 4,
            SavedPayload::BatchNorm { input, mean, inv_std } => {
                input.byte_size() + (mean.len() + inv_std.len()) as u64 * elem
            }
            SavedPayload::Probs { probs, labels } => probs.byte_size() + labels.len() as u64 * 4,
            SavedPayload::Pair(a, b) => a.byte_size() + b.byte_size(),
            SavedPayload::AxisArgmax { indices, .. } => indices.len() as u64 * 4,
        }
    }
}

/// Operation description carried by a tape node (and by network layers).
#[derive(Debug, Clone)]
pub enum OpKind<S: Scalar> {
    Conv2d {
        spec: Conv2dSpec,
        weight: ParamId,
        bias: Option<ParamId>,
        policy: SavePolicy,
    },
    BatchNorm2d {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    },
    Relu,
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    GlobalAvgPool,
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    SoftmaxCrossEntropy,
    Add,
    Mul,
    Scale(S),
    SumAll,
    MaxReduce { axis: usize },
    Compare,
}

impl<S: Scalar> OpKind<S> {
    pub fn id(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BatchNorm2d { .. } => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d { .. } => "maxpool2d",
            OpKind::GlobalAvgPool => "global_avgpool",
            OpKind::Linear { .. } => "linear",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::SumAll => "sum",
            OpKind::MaxReduce { .. } => "max_reduce",
            OpKind::Compare => "compare",
        }
    }
}

#[derive(Debug)]
pub struct TapeNode<S: Scalar> {
    pub name: String,
    pub op: OpKind<S>,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
    pub saved: SavedPayload<S>,
}

/// Gradients produced by one node's backward rule.
pub struct NodeGrads<S: Scalar> {
    /// Aligned with the node's inputs; `None` skips that input.
    pub inputs: Vec<Option<Tensor<S>>>,
    pub params: Vec<(ParamId, Tensor<S>)>,
}

pub type RuleFn<S> =
    fn(&TapeNode<S>, &Tensor<S>, &ParamStore<S>, &mut MemoryLedger) -> Result<NodeGrads<S>>;

/// Backward rules keyed by op id. A recorded op without a rule is a hard
/// error at backward time, named after the op.
pub struct RuleSet<S: Scalar> {
    rules: HashMap<&'static str, RuleFn<S>>,
}

impl<S: Scalar> RuleSet<S> {
    pub fn empty() -> Self {
        RuleSet { rules: HashMap::new() }
    }

    pub fn register(&mut self, op_id: &'static str, rule: RuleFn<S>) {
        self.rules.insert(op_id, rule);
    }

    pub fn get(&self, op_id: &str) -> Option<&RuleFn<S>> {
        self.rules.get(op_id)
    }
}

impl<S: Scalar> Default for RuleSet<S> {
    fn default() -> Self {
        crate::ops::rules::standard_rules()
    }
}

/// Gradients surviving backward for values the caller asked to keep.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    kept: Vec<(ValueId, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, value: ValueId) -> Option<&Tensor<S>> {
        self.kept.iter().find(|(v, _)| *v == value).map(|(_, t)| t)
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<TapeNode<S>>,
    rules: RuleSet<S>,
    num_values: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), rules: RuleSet::default(), num_values: 0 }
    }

    pub fn with_rules(rules: RuleSet<S>) -> Self {
        Tape { nodes: Vec::new(), rules, num_values: 0 }
    }

    pub fn nodes(&self) -> &[TapeNode<S>] {
        &self.nodes
    }

    /// Appends a node and attributes its saved payload to the ledger's
    /// activation category.
    pub fn record(
        &mut self,
        name: impl Into<String>,
        op: OpKind<S>,
        inputs: Vec<ValueId>,
        saved: SavedPayload<S>,
        output: ValueId,
        ledger: &mut MemoryLedger,
    ) -> usize {
        let name = name.into();
        let bytes = saved.byte_size();
        if bytes > 0 {
            ledger.alloc(AllocCategory::Activation, bytes, format!("save:{name}"));
        }
        self.num_values = self.num_values.max(output + 1);
        for &v in &inputs {
            self.num_values = self.num_values.max(v + 1);
        }
        self.nodes.push(TapeNode { name, op, inputs, output, saved });
        self.nodes.len() - 1
    }

    /// Runs the reverse sweep from `loss_value`, seeded with `loss_grad`.
    ///
    /// Parameter gradients accumulate into `params`. Gradients for the value
    /// ids listed in `keep` are returned; every other gradient buffer and all
    /// saved payloads are released to the ledger before this returns.
    pub fn backward(
        mut self,
        loss_value: ValueId,
        loss_grad: Tensor<S>,
        params: &mut ParamStore<S>,
        keep: &[ValueId],
        ledger: &mut MemoryLedger,
    ) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(self.num_values.max(loss_value + 1), || None);
        ledger.alloc(AllocCategory::Gradient, loss_grad.byte_size(), "gradbuf:loss");
        grads[loss_value] = Some(loss_grad.recategorized(AllocCategory::Gradient));

        for node in self.nodes.iter().rev() {
            let grad_out = grads[node.output].take();
            if let Some(grad_out) = grad_out {
                let rule = self
                    .rules
                    .get(node.op.id())
                    .ok_or_else(|| Error::MissingBackwardRule { op: node.op.id().to_string() })?;
                let produced = rule(node, &grad_out, params, ledger)?;
                ledger.free(
                    AllocCategory::Gradient,
                    grad_out.byte_size(),
                    format!("gradbuf:{}", node.name),
                )?;
                drop(grad_out);
                if produced.inputs.len() != node.inputs.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "rule for '{}' returned {} input gradients for {} inputs",
                        node.op.id(),
                        produced.inputs.len(),
                        node.inputs.len()
                    )));
                }
                for (value, grad) in node.inputs.iter().zip(produced.inputs) {
                    let Some(grad) = grad else { continue };
                    match &mut grads[*value] {
                        Some(existing) => *existing = existing.add(&grad)?,
                        slot @ None => {
                            ledger.alloc(
                                AllocCategory::Gradient,
                                grad.byte_size(),
                                format!("gradbuf:value{value}"),
                            );
                            *slot = Some(grad.recategorized(AllocCategory::Gradient));
                        }
                    }
                }
                for (pid, grad) in produced.params {
                    params.accumulate_grad(pid, grad, ledger)?;
                }
            }
            // Saved payloads are released in reverse node order whether or
            // not any gradient reached this node.
            let bytes = node.saved.byte_size();
            if bytes > 0 {
                ledger.free(AllocCategory::Activation, bytes, format!("release:{}", node.name))?;
            }
        }
        // Replacing payloads with None already happened logically; drop the
        // node storage itself now.
        self.nodes.clear();

        let mut kept = Vec::new();
        for (value, slot) in grads.iter_mut().enumerate() {
            let Some(grad) = slot.take() else { continue };
            if keep.contains(&value) {
                kept.push((value, grad));
            } else {
                ledger.free(AllocCategory::Gradient, grad.byte_size(), format!("gradbuf:value{value}"))?;
            }
        }
        Ok(Gradients { kept })
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}
