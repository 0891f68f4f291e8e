//! Training loop: SGD with momentum, step learning-rate schedule,
//! deterministic data ordering, per-step memory snapshots, metrics.

use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, Augmentation, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::ledger::{MemoryLedger, PointsOfInterest, Snapshot};
use crate::model::Network;
use crate::ops::loss::softmax_cross_entropy_forward;
use crate::scalar::Scalar;
use crate::tape::{OpKind, ParamStore, SavedPayload, Tape, ValueId};
use crate::tensor::{AllocCategory, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// Multiplicative decay applied every `lr_interval` epochs.
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub seed: u64,
    /// Visit samples in on-disk order every epoch instead of shuffling.
    pub fixed_order: bool,
    /// Random crop + horizontal flip; forced off by `fixed_order`.
    pub augment: bool,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 90,
            base_lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_interval: 30,
            seed: 0,
            fixed_order: false,
            augment: true,
            log_interval: 1,
        }
    }
}

/// `lr = base * decay^floor(epoch / interval)`
pub fn step_lr(epoch: usize, base_lr: f64, decay: f64, interval: usize) -> f64 {
    base_lr * decay.powi((epoch / interval.max(1)) as i32)
}

/// SGD with classic momentum: `v <- m v + g`, `w <- w - lr v`. Velocity
/// buffers appear on first use and count as optimizer state; with zero
/// momentum no state is ever allocated.
pub struct SgdMomentum<S: Scalar> {
    momentum: f64,
    velocities: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum, velocities: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<S>, lr: f64, ledger: &mut MemoryLedger) -> Result<()> {
        if self.velocities.len() < params.len() {
            self.velocities.resize_with(params.len(), || None);
        }
        let lr_s = S::from_f64_lossy(lr);
        let m_s = S::from_f64_lossy(self.momentum);
        for id in params.trainable_ids() {
            let Some(grad) = params.grad(id) else { continue };
            if grad.shape() != params.value(id).shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient and parameter shapes differ for '{}'",
                    params.entry(id).name
                )));
            }
            let grad = grad.clone();
            if self.momentum != 0.0 {
                if self.velocities[id].is_none() {
                    let zeros = Tensor::zeros(grad.shape().to_vec(), AllocCategory::OptimizerState);
                    ledger.alloc(
                        AllocCategory::OptimizerState,
                        zeros.byte_size(),
                        format!("velocity:{}", params.entry(id).name),
                    );
                    self.velocities[id] = Some(zeros);
                }
                let v = self.velocities[id].as_mut().unwrap();
                {
                    let vd = v.data_mut();
                    for (vi, &gi) in vd.iter_mut().zip(grad.data()) {
                        *vi = *vi * m_s + gi;
                    }
                }
                let mut w = params.value(id).clone();
                {
                    let wd = w.data_mut();
                    for (wi, &vi) in wd.iter_mut().zip(v.data()) {
                        *wi = *wi - lr_s * vi;
                    }
                }
                params.set_value(id, w);
            } else {
                let mut w = params.value(id).clone();
                {
                    let wd = w.data_mut();
                    for (wi, &gi) in wd.iter_mut().zip(grad.data()) {
                        *wi = *wi - lr_s * gi;
                    }
                }
                params.set_value(id, w);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub forward_peak_bytes: u64,
}

pub fn write_metrics_csv(records: &[MetricsRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,step,split,loss,acc,lr,forward_peak_bytes")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{:.6},{:.4},{:.6},{}",
            r.epoch, r.step, r.split, r.loss, r.acc, r.lr, r.forward_peak_bytes
        )?;
    }
    Ok(())
}

/// Which weight gradients to hand back from a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradSnapshotMode {
    /// Gradients of the final mini-batch of the final epoch.
    FinalBatch,
    /// Elementwise sum over all mini-batches of the final epoch.
    Accumulate,
}

pub struct TrainResult {
    pub metrics: Vec<MetricsRecord>,
    pub epoch_points: Vec<PointsOfInterest>,
    pub epoch_mean_loss: Vec<f64>,
    /// Flattened conv/linear weight gradients, if a snapshot was requested.
    pub grad_snapshot: Option<Vec<(String, Vec<f64>)>>,
}

/// Records the loss node on the tape and returns `(loss, loss value id)`.
/// Also retires the logits value, which the loss node consumed.
pub fn record_loss<S: Scalar>(
    net: &Network<S>,
    logits: &Tensor<S>,
    labels: &[u32],
    tape: &mut Tape<S>,
    ledger: &mut MemoryLedger,
) -> Result<(f64, ValueId)> {
    let (loss, probs) = softmax_cross_entropy_forward(logits, labels)?;
    let loss_value = net.num_values();
    tape.record(
        "loss",
        OpKind::SoftmaxCrossEntropy,
        vec![net.output_value()],
        SavedPayload::Probs { probs, labels: labels.to_vec() },
        loss_value,
        ledger,
    );
    let producer = net.nodes().last().map(|n| n.name.clone()).unwrap_or_default();
    ledger.free(AllocCategory::Activation, logits.byte_size(), format!("value:{producer}"))?;
    Ok((loss.data()[0].to_f64_lossy(), loss_value))
}

pub fn top1_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> f64 {
    let &[n, c] = logits.shape() else { return 0.0 };
    let mut hits = 0usize;
    for s in 0..n {
        let row = &logits.data()[s * c..][..c];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == labels[s] as usize {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

pub struct StepOutcome {
    pub loss: f64,
    pub acc: f64,
    pub forward_peak: Snapshot,
    pub after_backward: Snapshot,
    pub optimizer_peak: Snapshot,
}

/// One full training step: forward with tape, loss, backward, optimizer
/// update, gradient release. Input bytes stay allocated; the caller frees
/// them when it drops the batch.
pub fn train_step<S: Scalar>(
    net: &mut Network<S>,
    input: &Tensor<S>,
    labels: &[u32],
    optimizer: &mut SgdMomentum<S>,
    lr: f64,
    ledger: &mut MemoryLedger,
    epoch: usize,
    step: usize,
    grad_hook: Option<&mut dyn FnMut(&Network<S>)>,
) -> Result<StepOutcome> {
    ledger.arm_window();
    let mut tape = Tape::new();
    let logits = net.forward_train(input, &mut tape, ledger)?;
    let acc = top1_accuracy(&logits, labels);
    let (loss, loss_value) = record_loss(net, &logits, labels, &mut tape, ledger)?;
    drop(logits);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch, step });
    }
    let forward_peak = ledger.take_window_max();
    let seed = Tensor::scalar(S::one(), AllocCategory::Gradient);
    tape.backward(loss_value, seed, &mut net.params, &[], ledger)?;
    if let Some(hook) = grad_hook {
        hook(net);
    }
    let after_backward = ledger.snapshot();
    ledger.arm_window();
    optimizer.step(&mut net.params, lr, ledger)?;
    let optimizer_peak = ledger.take_window_max();
    net.params.clear_grads(ledger)?;
    Ok(StepOutcome { loss, acc, forward_peak, after_backward, optimizer_peak })
}

fn snapshot_weight_grads<S: Scalar>(net: &Network<S>, into: &mut Vec<(String, Vec<f64>)>) {
    if into.is_empty() {
        for (name, pid) in net.weight_param_ids() {
            let grads = net
                .params
                .grad(pid)
                .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_default();
            into.push((name, grads));
        }
    } else {
        for (slot, (_, pid)) in into.iter_mut().zip(net.weight_param_ids()) {
            if let Some(g) = net.params.grad(pid) {
                for (acc, v) in slot.1.iter_mut().zip(g.data()) {
                    *acc += v.to_f64_lossy();
                }
            }
        }
    }
}

/// Trains `net` on `dataset`. Deterministic given the config seed; with
/// `fixed_order` every epoch visits samples in on-disk order, which is the
/// precondition for comparing two runs gradient-by-gradient.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    dataset: &Dataset,
    norm: &Normalization,
    config: &TrainConfig,
    ledger: &mut MemoryLedger,
    snapshot_mode: Option<GradSnapshotMode>,
) -> Result<TrainResult> {
    if config.batch_size == 0 || dataset.len() < config.batch_size {
        return Err(Error::Config(format!(
            "batch size {} does not fit dataset of {} samples",
            config.batch_size,
            dataset.len()
        )));
    }
    let model_init = ledger.snapshot();
    let mut optimizer = SgdMomentum::new(config.momentum);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut augmentation = (config.augment && !config.fixed_order)
        .then(|| Augmentation::new(config.seed));

    let steps_per_epoch = dataset.len() / config.batch_size;
    let mut metrics = Vec::new();
    let mut epoch_points = Vec::new();
    let mut epoch_mean_loss = Vec::new();
    let mut input_init: Option<Snapshot> = None;
    let mut snapshot: Vec<(String, Vec<f64>)> = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let lr = step_lr(epoch, config.base_lr, config.lr_decay, config.lr_interval);
        if !config.fixed_order {
            for i in (1..order.len()).rev() {
                order.swap(i, shuffle_rng.gen_range(0..=i));
            }
        }
        let mut forward_peak = Snapshot::default();
        let mut optimizer_peak = Snapshot::default();
        let mut after_backward = Snapshot::default();
        let mut loss_sum = 0.0;
        let last_epoch = epoch + 1 == config.epochs;
        for step in 0..steps_per_epoch {
            let indices = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let (input, labels) = make_batch::<S>(dataset, indices, norm, augmentation.as_mut())?;
            ledger.alloc(AllocCategory::Input, input.byte_size(), "input_batch");
            if input_init.is_none() {
                input_init = Some(ledger.snapshot());
            }
            let take_snapshot = snapshot_mode.is_some()
                && last_epoch
                && (snapshot_mode == Some(GradSnapshotMode::Accumulate) || step + 1 == steps_per_epoch);
            let mut hook = |n: &Network<S>| snapshot_weight_grads(n, &mut snapshot);
            let outcome = train_step(
                net,
                &input,
                &labels,
                &mut optimizer,
                lr,
                ledger,
                epoch,
                step,
                take_snapshot.then_some(&mut hook as &mut dyn FnMut(&Network<S>)),
            )?;
            ledger.free(AllocCategory::Input, input.byte_size(), "input_batch")?;
            loss_sum += outcome.loss;
            if outcome.forward_peak.total > forward_peak.total {
                forward_peak = outcome.forward_peak;
            }
            if outcome.optimizer_peak.total > optimizer_peak.total {
                optimizer_peak = outcome.optimizer_peak;
            }
            after_backward = outcome.after_backward;
            if step % config.log_interval.max(1) == 0 || step + 1 == steps_per_epoch {
                metrics.push(MetricsRecord {
                    epoch,
                    step,
                    split: "train",
                    loss: outcome.loss,
                    acc: outcome.acc,
                    lr,
                    forward_peak_bytes: outcome.forward_peak.total,
                });
            }
        }
        epoch_mean_loss.push(loss_sum / steps_per_epoch as f64);
        epoch_points.push(PointsOfInterest {
            model_init,
            input_init: input_init.unwrap_or_default(),
            forward_peak,
            after_backward,
            optimizer_peak,
        });
    }
    Ok(TrainResult {
        metrics,
        epoch_points,
        epoch_mean_loss,
        grad_snapshot: snapshot_mode.map(|_| snapshot),
    })
}
