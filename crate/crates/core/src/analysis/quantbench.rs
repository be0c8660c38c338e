//! Quantization error of recorded optimizer states under each scheme.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::OptimizerKind;
use crate::statequant::{nmse, GroupSpec, QuantizedState, StateKind};
use crate::trainbench::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Companded,
    Linear,
}

impl QuantScheme {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Companded => "companded",
            Self::Linear => "linear",
        }
    }

    fn state_kind(self, buffer: BufferKind) -> StateKind {
        match (self, buffer) {
            (Self::Companded, BufferKind::Momentum) => StateKind::Momentum,
            (Self::Companded, BufferKind::Variance) => StateKind::Variance,
            (Self::Linear, BufferKind::Momentum) => StateKind::LinearSigned,
            (Self::Linear, BufferKind::Variance) => StateKind::LinearUnsigned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BufferKind {
    #[serde(rename = "m")]
    Momentum,
    #[serde(rename = "v")]
    Variance,
}

impl BufferKind {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Momentum => "m",
            Self::Variance => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantBenchRecord {
    pub step: u64,
    pub optimizer: OptimizerKind,
    pub buffer: BufferKind,
    pub scheme: QuantScheme,
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub optimizer: OptimizerKind,
    pub buffer: BufferKind,
    pub scheme: QuantScheme,
    pub count: usize,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
}

/// Quantizes each tensor of `buffer` separately, so groups never straddle
/// tensors, and measures the NMSE of the whole buffer.
fn buffer_nmse(
    buffer: &[f32],
    tensor_lens: &[usize],
    kind: StateKind,
    spec: GroupSpec,
) -> Result<f64> {
    let mut restored = Vec::with_capacity(buffer.len());
    let mut offset = 0;
    for &n in tensor_lens {
        let q = QuantizedState::quantize(kind, &buffer[offset..offset + n], spec)?;
        restored.extend(q.dequantize());
        offset += n;
    }
    nmse(buffer, &restored)
}

/// Quantizes and restores every recorded buffer under each scheme. Snapshots
/// where a buffer is identically zero have no defined NMSE and are skipped.
pub fn quant_error_bench(
    trajectory: &Trajectory,
    schemes: &[QuantScheme],
    spec: GroupSpec,
) -> Result<Vec<QuantBenchRecord>> {
    if trajectory.snapshots.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let total: usize = trajectory.tensor_lens.iter().sum();
    let mut out = Vec::new();
    for snap in &trajectory.snapshots {
        let buffers = [
            (BufferKind::Momentum, Some(&snap.momentum)),
            (BufferKind::Variance, snap.variance.as_ref()),
        ];
        for (buffer, data) in buffers {
            let Some(data) = data else { continue };
            if data.len() != total {
                return Err(Error::LengthMismatch {
                    expected: total,
                    found: data.len(),
                });
            }
            for &scheme in schemes {
                match buffer_nmse(data, &trajectory.tensor_lens, scheme.state_kind(buffer), spec) {
                    Ok(nmse) => out.push(QuantBenchRecord {
                        step: snap.step,
                        optimizer: trajectory.optimizer,
                        buffer,
                        scheme,
                        nmse,
                    }),
                    Err(Error::NmseUndefined) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// p10/p50/p90 of the NMSE per (optimizer, buffer, scheme), in that order.
pub fn quantile_summary(records: &[QuantBenchRecord]) -> Vec<QuantileSummary> {
    let mut groups: std::collections::BTreeMap<_, Vec<f64>> = Default::default();
    for r in records {
        groups
            .entry((r.optimizer, r.buffer, r.scheme))
            .or_default()
            .push(r.nmse);
    }
    groups
        .into_iter()
        .map(|((optimizer, buffer, scheme), mut v)| {
            v.sort_by(f64::total_cmp);
            QuantileSummary {
                optimizer,
                buffer,
                scheme,
                count: v.len(),
                p10: quantile(&v, 0.1),
                p50: quantile(&v, 0.5),
                p90: quantile(&v, 0.9),
            }
        })
        .collect()
}

pub fn records_csv(records: &[QuantBenchRecord]) -> String {
    let mut out = String::from("step,optimizer,buffer,scheme,nmse\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e}",
            r.step,
            r.optimizer.name(),
            r.buffer.name(),
            r.scheme.name(),
            r.nmse
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainbench::Snapshot;

    fn traj() -> Trajectory {
        let m: Vec<f32> = (0..80).map(|i| ((i as f32) * 0.37).sin() * 1e-3).collect();
        let v: Vec<f32> = m.iter().map(|x| x * x + 1e-12).collect();
        Trajectory {
            optimizer: OptimizerKind::AdamW,
            tensor_lens: vec![50, 30],
            snapshots: vec![
                Snapshot {
                    step: 1,
                    momentum: vec![0.0; 80],
                    variance: Some(vec![0.0; 80]),
                },
                Snapshot {
                    step: 2,
                    momentum: m,
                    variance: Some(v),
                },
            ],
        }
    }

    #[test]
    fn skips_zero_buffers_and_is_deterministic() {
        let t = traj();
        let schemes = [QuantScheme::Companded, QuantScheme::Linear];
        let a = quant_error_bench(&t, &schemes, GroupSpec::default()).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|r| r.step == 2 && r.nmse >= 0.0));
        assert_eq!(a, quant_error_bench(&t, &schemes, GroupSpec::default()).unwrap());
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        let mut t = traj();
        t.snapshots.clear();
        assert!(matches!(
            quant_error_bench(&t, &[QuantScheme::Linear], GroupSpec::default()),
            Err(Error::EmptyTrajectory)
        ));
    }

    #[test]
    fn quantiles_interpolate() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.1), 1.0);
        assert_eq!(quantile(&v, 0.5), 5.0);
        assert_eq!(quantile(&[2.0], 0.9), 2.0);
        assert!((quantile(&[0.0, 1.0], 0.25) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn summary_groups_by_buffer_and_scheme() {
        let t = traj();
        let r = quant_error_bench(&t, &[QuantScheme::Companded, QuantScheme::Linear], GroupSpec::default()).unwrap();
        let s = quantile_summary(&r);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].buffer, BufferKind::Momentum);
        assert_eq!(s[0].scheme, QuantScheme::Companded);
        assert!(records_csv(&r).starts_with("step,optimizer,buffer,scheme,nmse\n2,adamw,m,"));
    }
}
