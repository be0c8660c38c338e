//! Bytes-per-parameter accounting for optimizer states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{Mode, OptimizerKind, OptimizerState};

/// Per-parameter storage broken down by category. Group scales are kept out
/// of `total` and reported on their own lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub optimizer: OptimizerKind,
    pub mode: Mode,
    pub gradient_release: bool,
    pub params: usize,
    pub master_weights: f64,
    pub correction: f64,
    pub gradients: f64,
    pub momentum: f64,
    pub variance: f64,
    pub total: f64,
    /// Quantized state buffers carrying one FP16 scale per group.
    pub scaled_buffers: usize,
    /// `2 / G` for one buffer, assuming full groups.
    pub scale_overhead_per_buffer: f64,
    /// Actual scale bytes per parameter, including partial trailing groups.
    pub scale_overhead_exact: f64,
}

impl MemoryReport {
    pub fn scale_overhead_nominal(&self) -> f64 {
        self.scaled_buffers as f64 * self.scale_overhead_per_buffer
    }
}

/// Accounts the per-parameter storage of a model whose tensors are held in
/// `states`. Gradients are stored in the forward-weight format and vanish
/// with gradient release: at most one tensor's gradient is live at a time.
pub fn memory_report(states: &[OptimizerState], gradient_release: bool) -> Result<MemoryReport> {
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidConfig("memory report needs at least one state".into()))?;
    let (kind, mode) = (first.kind(), first.mode());
    if let Some(s) = states.iter().find(|s| s.kind() != kind || s.mode() != mode) {
        return Err(Error::InvalidConfig(format!(
            "mixed states in one report: {}/{:?} and {}/{:?}",
            kind.name(),
            mode,
            s.kind().name(),
            s.mode()
        )));
    }

    let mut report = MemoryReport {
        optimizer: kind,
        mode,
        gradient_release,
        params: states.iter().map(OptimizerState::len).sum(),
        master_weights: 0.0,
        correction: 0.0,
        gradients: 0.0,
        momentum: 0.0,
        variance: 0.0,
        total: 0.0,
        scaled_buffers: 0,
        scale_overhead_per_buffer: 0.0,
        scale_overhead_exact: 0.0,
    };

    let weight_bytes;
    match first {
        OptimizerState::Reference(_) => {
            weight_bytes = 4.0;
            report.momentum = 4.0;
            report.variance = if kind.has_variance() { 4.0 } else { 0.0 };
        }
        OptimizerState::Flash(s) => {
            weight_bytes = (s.weights.format().storage_bits() / 8) as f64;
            report.correction = (s.weights.width().bits() / 8) as f64;
            report.momentum = 1.0;
            report.variance = if kind.has_variance() { 1.0 } else { 0.0 };
            report.scaled_buffers = if kind.has_variance() { 2 } else { 1 };
            report.scale_overhead_per_buffer = 2.0 / s.momentum.spec().group_size() as f64;
            let scale_bytes: usize = states
                .iter()
                .map(|st| match st {
                    OptimizerState::Flash(f) => {
                        2 * (f.momentum.scales().len()
                            + f.variance.as_ref().map_or(0, |v| v.scales().len()))
                    }
                    OptimizerState::Reference(_) => 0,
                })
                .sum();
            if report.params > 0 {
                report.scale_overhead_exact = scale_bytes as f64 / report.params as f64;
            }
        }
    }
    report.master_weights = weight_bytes;
    report.gradients = if gradient_release { 0.0 } else { weight_bytes };
    report.total = report.master_weights
        + report.correction
        + report.gradients
        + report.momentum
        + report.variance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::VarianceScheme;

    fn states(kind: OptimizerKind, mode: Mode, sizes: &[usize]) -> Vec<OptimizerState> {
        sizes
            .iter()
            .map(|&n| OptimizerState::new(&vec![0.5; n], kind, mode, VarianceScheme::Companded).unwrap())
            .collect()
    }

    #[test]
    fn lion_matches_sgd_layout() {
        let r = memory_report(&states(OptimizerKind::Lion, Mode::Flash, &[64]), false).unwrap();
        assert_eq!(r.total, 6.0);
        assert_eq!(r.scale_overhead_exact, 0.0625);
    }

    #[test]
    fn partial_groups_raise_exact_overhead() {
        let r = memory_report(&states(OptimizerKind::AdamW, Mode::Flash, &[33]), true).unwrap();
        assert_eq!(r.total, 5.0);
        assert_eq!(r.scale_overhead_nominal(), 0.125);
        assert!((r.scale_overhead_exact - 8.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_mixed_or_empty() {
        assert!(memory_report(&[], false).is_err());
        let mut s = states(OptimizerKind::Sgd, Mode::Flash, &[4]);
        s.extend(states(OptimizerKind::Sgd, Mode::Reference, &[4]));
        assert!(memory_report(&s, false).is_err());
    }
}
