//! Group-wise 8-bit quantization of optimizer state.
//!
//! Each contiguous group of `G` elements shares one FP16 absmax scale. Before
//! uniform rounding, momentum is companded with the softsign-like
//! `phi_m(x) = 2x / (1 + |x|)` and variance with `phi_v(x) = sqrt(x)`. The
//! linear kinds skip companding and exist as the comparison baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatcodec::LowPrecisionFormat;

const SCALE_FORMAT: LowPrecisionFormat = LowPrecisionFormat::Fp16;
const SIGNED_LEVELS: f32 = 127.0;
const UNSIGNED_LEVELS: f32 = 255.0;

pub const DEFAULT_GROUP_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    group_size: usize,
}

impl Default for GroupSpec {
    fn default() -> Self {
        Self {
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

impl GroupSpec {
    pub fn new(group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidConfig("group size must be at least 1".into()));
        }
        Ok(Self { group_size })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_count(&self, len: usize) -> usize {
        len.div_ceil(self.group_size)
    }

    /// Scale storage in bytes per element: `2 * ceil(len / G) / len`.
    pub fn scale_overhead_bytes_per_element(&self, len: usize) -> f64 {
        if len == 0 {
            return 0.0;
        }
        2.0 * self.group_count(len) as f64 / len as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateKind {
    Momentum,
    Variance,
    LinearSigned,
    LinearUnsigned,
}

impl StateKind {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Momentum => "momentum",
            Self::Variance => "variance",
            Self::LinearSigned => "linear-signed",
            Self::LinearUnsigned => "linear-unsigned",
        }
    }

    pub const fn is_signed(self) -> bool {
        matches!(self, Self::Momentum | Self::LinearSigned)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateCodes {
    Signed(Vec<i8>),
    Unsigned(Vec<u8>),
}

impl StateCodes {
    pub fn len(&self) -> usize {
        match self {
            Self::Signed(c) => c.len(),
            Self::Unsigned(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rounds a non-negative magnitude up to the nearest FP16 value.
fn scale_code_up(absmax: f32) -> Result<u16> {
    let mut code = SCALE_FORMAT.downcast(absmax);
    if SCALE_FORMAT.is_finite_code(code) && SCALE_FORMAT.upcast(code) < absmax {
        code += 1;
    }
    if !SCALE_FORMAT.is_finite_code(code) {
        return Err(Error::ScaleOverflow { absmax });
    }
    Ok(code)
}

#[inline]
pub fn compand_momentum(x: f32) -> f32 {
    2.0 * x / (1.0 + x.abs())
}

#[inline]
pub fn expand_momentum(z: f32) -> f32 {
    z / (2.0 - z.abs())
}

/// An optimizer state buffer stored as 8-bit codes plus FP16 group scales.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedState {
    kind: StateKind,
    spec: GroupSpec,
    codes: StateCodes,
    scales: Vec<u16>,
}

impl QuantizedState {
    /// The quantized form of an all-zero buffer.
    pub fn zeros(kind: StateKind, len: usize, spec: GroupSpec) -> Self {
        let codes = if kind.is_signed() {
            StateCodes::Signed(vec![0; len])
        } else {
            StateCodes::Unsigned(vec![0; len])
        };
        Self {
            kind,
            spec,
            codes,
            scales: vec![0; spec.group_count(len)],
        }
    }

    pub fn quantize(kind: StateKind, values: &[f32], spec: GroupSpec) -> Result<Self> {
        let mut q = Self::zeros(kind, values.len(), spec);
        for (g, chunk) in values.chunks(spec.group_size).enumerate() {
            q.store_group(g, chunk)?;
        }
        Ok(q)
    }

    /// Assembles a state from stored parts, validating every invariant.
    pub fn from_parts(
        kind: StateKind,
        spec: GroupSpec,
        codes: StateCodes,
        scales: Vec<u16>,
    ) -> Result<Self> {
        let expected = spec.group_count(codes.len());
        if scales.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: scales.len(),
            });
        }
        for &s in &scales {
            if s & 0x8000 != 0 || !SCALE_FORMAT.is_finite_code(s) {
                return Err(Error::InvalidStateCode(format!(
                    "scale {s:#06x} is negative or not finite"
                )));
            }
        }
        match (&codes, kind.is_signed()) {
            (StateCodes::Signed(c), true) => {
                if c.contains(&i8::MIN) {
                    return Err(Error::InvalidStateCode(
                        "signed state code -128 is never produced".into(),
                    ));
                }
            }
            (StateCodes::Unsigned(_), false) => {}
            _ => {
                return Err(Error::InvalidStateCode(format!(
                    "code signedness does not match {} state",
                    kind.name()
                )))
            }
        }
        Ok(Self {
            kind,
            spec,
            codes,
            scales,
        })
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn spec(&self) -> GroupSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &StateCodes {
        &self.codes
    }

    /// FP16 bit patterns, one per group.
    pub fn scales(&self) -> &[u16] {
        &self.scales
    }

    pub fn scale(&self, group: usize) -> f32 {
        SCALE_FORMAT.upcast(self.scales[group])
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    fn group_range(&self, group: usize) -> std::ops::Range<usize> {
        let g = self.spec.group_size;
        let start = group * g;
        start..(start + g).min(self.len())
    }

    /// Quantizes `values` into group `group`, replacing its scale and codes.
    pub fn store_group(&mut self, group: usize, values: &[f32]) -> Result<()> {
        let range = self.group_range(group);
        if values.len() != range.len() {
            return Err(Error::LengthMismatch {
                expected: range.len(),
                found: values.len(),
            });
        }
        let base = range.start;
        let mut absmax = 0.0_f32;
        for (i, &x) in values.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::QuantizeNonFinite {
                    index: base + i,
                    value: x,
                });
            }
            if !self.kind.is_signed() && x < 0.0 {
                return Err(Error::NegativeVariance {
                    index: base + i,
                    value: x,
                });
            }
            let mag = match self.kind {
                StateKind::Variance => x.sqrt(),
                _ => x.abs(),
            };
            absmax = absmax.max(mag);
        }

        if absmax == 0.0 {
            self.scales[group] = 0;
            match &mut self.codes {
                StateCodes::Signed(c) => c[range].fill(0),
                StateCodes::Unsigned(c) => c[range].fill(0),
            }
            return Ok(());
        }

        let scale_code = scale_code_up(absmax)?;
        let scale = SCALE_FORMAT.upcast(scale_code);
        self.scales[group] = scale_code;

        match (&mut self.codes, self.kind) {
            (StateCodes::Signed(c), StateKind::Momentum) => {
                for (dst, &x) in c[range].iter_mut().zip(values) {
                    let z = compand_momentum(x / scale);
                    *dst = (z * SIGNED_LEVELS)
                        .round_ties_even()
                        .clamp(-SIGNED_LEVELS, SIGNED_LEVELS) as i8;
                }
            }
            (StateCodes::Signed(c), _) => {
                for (dst, &x) in c[range].iter_mut().zip(values) {
                    *dst = (x / scale * SIGNED_LEVELS)
                        .round_ties_even()
                        .clamp(-SIGNED_LEVELS, SIGNED_LEVELS) as i8;
                }
            }
            (StateCodes::Unsigned(c), StateKind::Variance) => {
                for (dst, &x) in c[range].iter_mut().zip(values) {
                    *dst = (x.sqrt() / scale * UNSIGNED_LEVELS)
                        .round_ties_even()
                        .clamp(0.0, UNSIGNED_LEVELS) as u8;
                }
            }
            (StateCodes::Unsigned(c), _) => {
                for (dst, &x) in c[range].iter_mut().zip(values) {
                    *dst = (x / scale * UNSIGNED_LEVELS)
                        .round_ties_even()
                        .clamp(0.0, UNSIGNED_LEVELS) as u8;
                }
            }
        }
        Ok(())
    }

    /// Dequantizes group `group` into `out`.
    pub fn load_group(&self, group: usize, out: &mut [f32]) {
        let range = self.group_range(group);
        debug_assert_eq!(out.len(), range.len());
        let code = self.scales[group];
        if code == 0 {
            out.fill(0.0);
            return;
        }
        let scale = SCALE_FORMAT.upcast(code);
        match (&self.codes, self.kind) {
            (StateCodes::Signed(c), StateKind::Momentum) => {
                for (o, &q) in out.iter_mut().zip(&c[range]) {
                    *o = expand_momentum(q as f32 / SIGNED_LEVELS) * scale;
                }
            }
            (StateCodes::Signed(c), _) => {
                for (o, &q) in out.iter_mut().zip(&c[range]) {
                    *o = q as f32 / SIGNED_LEVELS * scale;
                }
            }
            (StateCodes::Unsigned(c), StateKind::Variance) => {
                for (o, &q) in out.iter_mut().zip(&c[range]) {
                    let r = q as f32 / UNSIGNED_LEVELS * scale;
                    *o = r * r;
                }
            }
            (StateCodes::Unsigned(c), _) => {
                for (o, &q) in out.iter_mut().zip(&c[range]) {
                    *o = q as f32 / UNSIGNED_LEVELS * scale;
                }
            }
        }
    }

    pub fn dequantize_into(&self, out: &mut [f32]) -> Result<()> {
        if out.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                found: out.len(),
            });
        }
        for (g, chunk) in out.chunks_mut(self.spec.group_size).enumerate() {
            self.load_group(g, chunk);
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.len()];
        for (g, chunk) in out.chunks_mut(self.spec.group_size).enumerate() {
            self.load_group(g, chunk);
        }
        out
    }

    fn expect_kind(&self, kind: StateKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.name(),
                found: self.kind.name(),
            });
        }
        Ok(())
    }

    /// Bytes of code and scale storage.
    pub fn storage_bytes(&self) -> usize {
        self.len() + 2 * self.scales.len()
    }
}

pub fn quantize_momentum(m: &[f32], spec: GroupSpec) -> Result<QuantizedState> {
    QuantizedState::quantize(StateKind::Momentum, m, spec)
}

pub fn dequantize_momentum(q: &QuantizedState) -> Result<Vec<f32>> {
    q.expect_kind(StateKind::Momentum)?;
    Ok(q.dequantize())
}

pub fn quantize_variance(v: &[f32], spec: GroupSpec) -> Result<QuantizedState> {
    QuantizedState::quantize(StateKind::Variance, v, spec)
}

pub fn dequantize_variance(q: &QuantizedState) -> Result<Vec<f32>> {
    q.expect_kind(StateKind::Variance)?;
    Ok(q.dequantize())
}

pub fn quantize_linear(x: &[f32], spec: GroupSpec, signed: bool) -> Result<QuantizedState> {
    let kind = if signed {
        StateKind::LinearSigned
    } else {
        StateKind::LinearUnsigned
    };
    QuantizedState::quantize(kind, x, spec)
}

/// Normalized MSE `sum((x - xhat)^2) / sum(x^2)`, accumulated in f64.
pub fn nmse(x: &[f32], xhat: &[f32]) -> Result<f64> {
    if x.len() != xhat.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            found: xhat.len(),
        });
    }
    let mut err = 0.0_f64;
    let mut energy = 0.0_f64;
    for (&a, &b) in x.iter().zip(xhat) {
        let d = a as f64 - b as f64;
        err += d * d;
        energy += a as f64 * a as f64;
    }
    if energy == 0.0 {
        return Err(Error::NmseUndefined);
    }
    Ok(err / energy)
}
