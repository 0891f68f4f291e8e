//! Runtime allocation tracking by category.
//!
//! The ledger counts logical bytes: the bytes a tensor or saved payload
//! requests, not allocator pool state. Every event carries a signed delta, a
//! category, and a label, so traces stay deterministic and machine
//! independent. Five named snapshots cover the interesting moments of a
//! training step: model init, input init, forward peak, after backward, and
//! the optimizer peak.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::AllocCategory;

pub const MIB: f64 = (1u64 << 20) as f64;

/// One allocation or release, in program order.
#[derive(Debug, Clone)]
pub struct LedgerEvent {
    pub seq: usize,
    pub delta_bytes: i64,
    pub category: AllocCategory,
    pub label: String,
    pub running_total: u64,
}

/// Byte totals at one instant, split by category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub total: u64,
    pub by_category: [u64; 6],
}

impl Snapshot {
    pub fn category(&self, cat: AllocCategory) -> u64 {
        self.by_category[cat.index()]
    }
}

/// The five points of interest of one forward/backward/optimize cycle.
#[derive(Debug, Clone, Default)]
pub struct PointsOfInterest {
    pub model_init: Snapshot,
    pub input_init: Snapshot,
    /// Running maximum between input init and the start of backward.
    pub forward_peak: Snapshot,
    pub after_backward: Snapshot,
    /// Running maximum during the optimizer phase.
    pub optimizer_peak: Snapshot,
}

impl PointsOfInterest {
    /// Basic ordering sanity: the forward peak dominates both the state it
    /// grew from and the post-backward minimum.
    pub fn is_consistent(&self) -> bool {
        self.forward_peak.total >= self.input_init.total
            && self.forward_peak.total >= self.after_backward.total
    }

    pub fn labeled(&self) -> [(&'static str, &Snapshot); 5] {
        [
            ("model_init", &self.model_init),
            ("input_init", &self.input_init),
            ("forward_peak", &self.forward_peak),
            ("after_backward", &self.after_backward),
            ("optimizer_peak", &self.optimizer_peak),
        ]
    }
}

#[derive(Debug, Default)]
pub struct MemoryLedger {
    events: Vec<LedgerEvent>,
    current: [u64; 6],
    total: u64,
    /// Windowed running maximum, armed by [`MemoryLedger::arm_window`].
    window_max: Option<Snapshot>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        MemoryLedger::default()
    }

    pub fn alloc(&mut self, category: AllocCategory, bytes: u64, label: impl Into<String>) {
        self.track(bytes as i64, category, label.into()).expect("alloc cannot underflow");
    }

    pub fn free(&mut self, category: AllocCategory, bytes: u64, label: impl Into<String>) -> Result<()> {
        self.track(-(bytes as i64), category, label.into())
    }

    fn track(&mut self, delta: i64, category: AllocCategory, label: String) -> Result<()> {
        let idx = category.index();
        if delta < 0 {
            let d = (-delta) as u64;
            if d > self.current[idx] {
                return Err(Error::LedgerUnderflow {
                    category: category.name(),
                    delta: d,
                    current: self.current[idx],
                    label,
                });
            }
            self.current[idx] -= d;
            self.total -= d;
        } else {
            self.current[idx] += delta as u64;
            self.total += delta as u64;
        }
        self.events.push(LedgerEvent {
            seq: self.events.len(),
            delta_bytes: delta,
            category,
            label,
            running_total: self.total,
        });
        if let Some(max) = &mut self.window_max {
            if self.total > max.total {
                *max = Snapshot { total: self.total, by_category: self.current };
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { total: self.total, by_category: self.current }
    }

    pub fn current_total(&self) -> u64 {
        self.total
    }

    pub fn current_category(&self, cat: AllocCategory) -> u64 {
        self.current[cat.index()]
    }

    /// Starts tracking the running maximum from the current state.
    pub fn arm_window(&mut self) {
        self.window_max = Some(self.snapshot());
    }

    /// Stops window tracking and returns the maximum seen since arming.
    pub fn take_window_max(&mut self) -> Snapshot {
        self.window_max.take().unwrap_or_else(|| self.snapshot())
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Sums the deltas of all events whose label matches `pred`, by category.
    pub fn labeled_bytes(&self, pred: impl Fn(&str) -> bool) -> i64 {
        self.events
            .iter()
            .filter(|e| pred(&e.label))
            .map(|e| e.delta_bytes)
            .sum()
    }

    /// Writes the trace as `seq,delta_bytes,category,label,running_total`.
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "seq,delta_bytes,category,label,running_total")?;
        for e in &self.events {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.seq,
                e.delta_bytes,
                e.category.name(),
                e.label,
                e.running_total
            )?;
        }
        Ok(())
    }
}

/// Device capacities are quoted in GB (1e9 bytes) while measurements are in
/// binary units, so the comparison converts explicitly.
#[derive(Debug, Clone)]
pub struct FootprintReport {
    pub peak_total_bytes: u64,
    pub peak_activation_bytes: u64,
    /// Activation share of the peak, in [0, 1].
    pub activation_share: f64,
    pub verdicts: Vec<DeviceVerdict>,
}

#[derive(Debug, Clone, Copy)]
pub struct DeviceVerdict {
    pub capacity_gb: f64,
    pub fits: bool,
}

/// Summarizes a run's forward peak against a list of device capacities.
pub fn footprint_report(points: &PointsOfInterest, device_capacities_gb: &[f64]) -> Result<FootprintReport> {
    let peak = &points.forward_peak;
    if peak.total == 0 {
        return Err(Error::Config("footprint report requires recorded snapshots".into()));
    }
    let activation = peak.category(AllocCategory::Activation);
    let verdicts = device_capacities_gb
        .iter()
        .map(|&gb| DeviceVerdict { capacity_gb: gb, fits: gb * 1e9 >= peak.total as f64 })
        .collect();
    Ok(FootprintReport {
        peak_total_bytes: peak.total,
        peak_activation_bytes: activation,
        activation_share: activation as f64 / peak.total as f64,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_free_and_peak() {
        let mut ledger = MemoryLedger::new();
        ledger.arm_window();
        ledger.alloc(AllocCategory::Activation, 100, "a");
        ledger.alloc(AllocCategory::Activation, 50, "b");
        ledger.free(AllocCategory::Activation, 100, "a").unwrap();
        assert_eq!(ledger.current_total(), 50);
        assert_eq!(ledger.take_window_max().total, 150);
    }

    #[test]
    fn underflow_is_a_hard_error() {
        let mut ledger = MemoryLedger::new();
        ledger.alloc(AllocCategory::Gradient, 10, "g");
        let err = ledger.free(AllocCategory::Gradient, 11, "g").unwrap_err();
        assert!(matches!(err, Error::LedgerUnderflow { .. }));
        // The failed free must not corrupt the running sums.
        assert_eq!(ledger.current_total(), 10);
    }

    #[test]
    fn conservation_over_event_stream() {
        let mut ledger = MemoryLedger::new();
        let deltas: [(i64, AllocCategory); 6] = [
            (64, AllocCategory::Parameter),
            (32, AllocCategory::Input),
            (128, AllocCategory::Activation),
            (-128, AllocCategory::Activation),
            (16, AllocCategory::Gradient),
            (-16, AllocCategory::Gradient),
        ];
        for (d, c) in deltas {
            if d >= 0 {
                ledger.alloc(c, d as u64, "x");
            } else {
                ledger.free(c, (-d) as u64, "x").unwrap();
            }
        }
        let sum: i64 = ledger.events().iter().map(|e| e.delta_bytes).sum();
        assert_eq!(sum as u64, ledger.current_total());
        for e in ledger.events() {
            let prefix: i64 = ledger.events()[..=e.seq].iter().map(|ev| ev.delta_bytes).sum();
            assert_eq!(prefix as u64, e.running_total);
        }
    }

    #[test]
    fn device_fit_uses_decimal_gigabytes() {
        // A 10 GiB peak does not fit an 8 GB (= 7.45 GiB) device but fits
        // 12 GB and 16 GB ones.
        let points = PointsOfInterest {
            forward_peak: Snapshot {
                total: 10 * (1 << 30),
                by_category: {
                    let mut c = [0u64; 6];
                    c[AllocCategory::Activation.index()] = 9 * (1 << 30);
                    c
                },
            },
            ..Default::default()
        };
        let report = footprint_report(&points, &[8.0, 12.0, 16.0]).unwrap();
        let fits: Vec<bool> = report.verdicts.iter().map(|v| v.fits).collect();
        assert_eq!(fits, vec![false, true, true]);
        assert!((report.activation_share - 0.9).abs() < 1e-12);
    }

    #[test]
    fn footprint_requires_snapshots() {
        assert!(footprint_report(&PointsOfInterest::default(), &[8.0]).is_err());
    }

    #[test]
    fn no_optimizer_allocations_means_peak_equals_current() {
        let mut ledger = MemoryLedger::new();
        ledger.alloc(AllocCategory::Parameter, 100, "w");
        let after_backward = ledger.snapshot();
        ledger.arm_window();
        // Plain SGD without momentum allocates nothing here.
        let optimizer_peak = ledger.take_window_max();
        assert_eq!(optimizer_peak.total, after_backward.total);
    }

    #[test]
    fn trace_export_format() {
        let mut ledger = MemoryLedger::new();
        ledger.alloc(AllocCategory::Input, 12, "batch");
        ledger.free(AllocCategory::Input, 12, "batch").unwrap();
        let mut buf = Vec::new();
        ledger.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("seq,delta_bytes,category,label,running_total"));
        assert_eq!(lines.next(), Some("0,12,input,batch,12"));
        assert_eq!(lines.next(), Some("1,-12,input,batch,0"));
    }
}
