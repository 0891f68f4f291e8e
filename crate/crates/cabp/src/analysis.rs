//! Layer sensitivity via gradient cosine similarity.
//!
//! Two runs with the same initialization, seed, and fixed data order differ
//! only where compression perturbs weight gradients, so the per-layer cosine
//! between their gradients localizes the damage. Bit-identical gradients
//! report exactly 1.

use std::io::Write;

use crate::data::{make_batch, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::model::Network;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{AllocCategory, Tensor};
use crate::train::{record_loss, train, GradSnapshotMode, TrainConfig};

/// Cosine of two flat vectors, accumulated in f64.
///
/// Bit-identical nonzero inputs short-circuit to exactly 1.0; a zero-norm
/// operand is an explicit error rather than a silent zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    let mut identical = true;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
        identical &= x.to_bits() == y.to_bits();
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    if identical {
        return Ok(1.0);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[derive(Debug, Clone)]
pub struct ReportMeta {
    pub policy: String,
    pub seed: u64,
    pub epochs: usize,
    pub mode: String,
}

/// Per-layer cosine between two runs' weight gradients.
#[derive(Debug, Clone)]
pub struct GradSimilarityReport {
    pub entries: Vec<(String, f64)>,
    pub meta: ReportMeta,
}

impl GradSimilarityReport {
    pub fn get(&self, layer: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == layer).map(|(_, c)| *c)
    }

    /// `layer,cosine` rows with `#` metadata header comments.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# policy={}", self.meta.policy)?;
        writeln!(out, "# seed={}", self.meta.seed)?;
        writeln!(out, "# epochs={}", self.meta.epochs)?;
        writeln!(out, "# mode={}", self.meta.mode)?;
        writeln!(out, "layer,cosine")?;
        for (layer, c) in &self.entries {
            writeln!(out, "{layer},{c:.12}")?;
        }
        Ok(())
    }
}

/// Pairs up equally named layers from two gradient snapshots.
pub fn layer_similarity(
    a: &[(String, Vec<f64>)],
    b: &[(String, Vec<f64>)],
    meta: ReportMeta,
) -> Result<GradSimilarityReport> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "runs report {} and {} layers",
            a.len(),
            b.len()
        )));
    }
    let mut entries = Vec::with_capacity(a.len());
    for ((na, ga), (nb, gb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(Error::ShapeMismatch(format!(
                "layer name mismatch between runs: '{na}' vs '{nb}'"
            )));
        }
        entries.push((na.clone(), cosine(ga, gb)?));
    }
    Ok(GradSimilarityReport { entries, meta })
}

/// One forward/backward pass; returns flattened conv/linear weight gradients
/// without applying any update.
pub fn single_step_grads<S: Scalar>(
    net: &mut Network<S>,
    input: &Tensor<S>,
    labels: &[u32],
    ledger: &mut MemoryLedger,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut tape = Tape::new();
    ledger.alloc(AllocCategory::Input, input.byte_size(), "input_batch");
    let logits = net.forward_train(input, &mut tape, ledger)?;
    let (_, loss_value) = record_loss(net, &logits, labels, &mut tape, ledger)?;
    drop(logits);
    tape.backward(loss_value, Tensor::scalar(S::one(), AllocCategory::Gradient), &mut net.params, &[], ledger)?;
    let grads = net
        .weight_param_ids()
        .into_iter()
        .map(|(name, pid)| {
            let g = net
                .params
                .grad(pid)
                .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_default();
            (name, g)
        })
        .collect();
    net.params.clear_grads(ledger)?;
    ledger.free(AllocCategory::Input, input.byte_size(), "input_batch")?;
    Ok(grads)
}

/// Step-0 comparison: both networks see the same batch from identical
/// weights; no update is applied. Layers whose stored activation is
/// uncompressed must come out at exactly 1.
pub fn first_step_similarity<S: Scalar>(
    baseline: &mut Network<S>,
    compressed: &mut Network<S>,
    input: &Tensor<S>,
    labels: &[u32],
    meta: ReportMeta,
) -> Result<GradSimilarityReport> {
    let mut ledger_a = MemoryLedger::new();
    let mut ledger_b = MemoryLedger::new();
    let ga = single_step_grads(baseline, input, labels, &mut ledger_a)?;
    let gb = single_step_grads(compressed, input, labels, &mut ledger_b)?;
    layer_similarity(&ga, &gb, meta)
}

/// Trains both networks for `config.epochs` with a shared fixed data order
/// and compares the requested gradient snapshot.
pub fn epoch_similarity<S: Scalar>(
    baseline: &mut Network<S>,
    compressed: &mut Network<S>,
    dataset: &Dataset,
    norm: &Normalization,
    config: &TrainConfig,
    mode: GradSnapshotMode,
    meta: ReportMeta,
) -> Result<GradSimilarityReport> {
    let mut cfg = config.clone();
    cfg.fixed_order = true;
    cfg.augment = false;
    let mut ledger_a = MemoryLedger::new();
    let mut ledger_b = MemoryLedger::new();
    let ra = train(baseline, dataset, norm, &cfg, &mut ledger_a, Some(mode))?;
    let rb = train(compressed, dataset, norm, &cfg, &mut ledger_b, Some(mode))?;
    layer_similarity(
        ra.grad_snapshot.as_deref().unwrap_or(&[]),
        rb.grad_snapshot.as_deref().unwrap_or(&[]),
        meta,
    )
}

/// Convenience for building batches in sensitivity runs.
pub fn first_batch<S: Scalar>(
    dataset: &Dataset,
    batch_size: usize,
    norm: &Normalization,
) -> Result<(Tensor<S>, Vec<u32>)> {
    if dataset.len() < batch_size {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not fit dataset of {} samples",
            dataset.len()
        )));
    }
    let indices: Vec<usize> = (0..batch_size).collect();
    make_batch(dataset, &indices, norm, None)
}

/// Median of the cosines whose layer name satisfies `pred`.
pub fn median_where(report: &GradSimilarityReport, pred: impl Fn(&str) -> bool) -> Option<f64> {
    let mut values: Vec<f64> = report
        .entries
        .iter()
        .filter(|(n, _)| pred(n))
        .map(|(_, c)| *c)
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}
