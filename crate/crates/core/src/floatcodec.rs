//! Bit-exact FP32 <-> 16-bit float conversion and ULP-normalized weight splitting.
//!
//! A master weight `theta` is stored as its round-to-nearest 16-bit value
//! `theta'` plus a signed integer correction `rho`. Under round-to-nearest the
//! rounding error always lies in `[-u/2, u/2]` with `u = ULP(theta')`, so the
//! error's exponent is implied by `theta'` and only its position inside that
//! interval needs to be stored:
//!
//! ```text
//! rho   = round(e / (u/2) * N)            e = theta - theta'
//! theta ~ theta' + (rho / N) * (u/2)
//! ```
//!
//! The rescale by `2^-l` (with `2^l = u/2`) is applied as two power-of-two
//! multiplications so that neither factor leaves the FP32 normal range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 16-bit floating-point storage format for low-precision weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowPrecisionFormat {
    Bf16,
    Fp16,
}

impl LowPrecisionFormat {
    #[inline(always)]
    pub const fn name(self) -> &'static str {
        match self {
            Self::Bf16 => "bf16",
            Self::Fp16 => "fp16",
        }
    }

    #[inline(always)]
    pub const fn exponent_bits(self) -> u32 {
        match self {
            Self::Bf16 => 8,
            Self::Fp16 => 5,
        }
    }

    #[inline(always)]
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            Self::Bf16 => 7,
            Self::Fp16 => 10,
        }
    }

    #[inline(always)]
    pub const fn bias(self) -> i32 {
        match self {
            Self::Bf16 => 127,
            Self::Fp16 => 15,
        }
    }

    /// Total storage width including the sign bit.
    #[inline(always)]
    pub const fn storage_bits(self) -> u32 {
        1 + self.exponent_bits() + self.mantissa_bits()
    }

    /// Smallest unbiased exponent of a normal value.
    #[inline(always)]
    pub const fn min_normal_exponent(self) -> i32 {
        1 - self.bias()
    }

    #[inline(always)]
    const fn exponent_mask(self) -> u16 {
        (((1u32 << self.exponent_bits()) - 1) << self.mantissa_bits()) as u16
    }

    #[inline(always)]
    const fn mantissa_mask(self) -> u16 {
        ((1u32 << self.mantissa_bits()) - 1) as u16
    }

    #[inline(always)]
    const fn sign_mask(self) -> u16 {
        0x8000
    }

    #[inline(always)]
    pub const fn infinity_code(self) -> u16 {
        self.exponent_mask()
    }

    #[inline(always)]
    pub const fn quiet_nan_code(self) -> u16 {
        self.exponent_mask() | (1 << (self.mantissa_bits() - 1))
    }

    pub fn max_finite(self) -> f32 {
        self.upcast(self.infinity_code() - 1)
    }

    #[inline(always)]
    pub const fn is_finite_code(self, code: u16) -> bool {
        code & self.exponent_mask() != self.exponent_mask()
    }

    /// True when the code is a normal (not zero, not subnormal, finite) value.
    #[inline(always)]
    pub const fn is_normal_code(self, code: u16) -> bool {
        let exp = code & self.exponent_mask();
        exp != 0 && exp != self.exponent_mask()
    }

    /// Rounds an FP32 value to this format: round-to-nearest, ties-to-even.
    ///
    /// Overflow saturates to infinity, NaN becomes the canonical quiet NaN
    /// with the input's sign, and the sign of zero is preserved.
    #[inline(always)]
    pub fn downcast(self, x: f32) -> u16 {
        let bits = x.to_bits();
        let sign = ((bits >> 16) & 0x8000) as u16;
        let abs = bits & 0x7fff_ffff;
        if abs > 0x7f80_0000 {
            return sign | self.quiet_nan_code();
        }
        if abs == 0x7f80_0000 {
            return sign | self.infinity_code();
        }
        if let Self::Bf16 = self {
            // BF16 shares the FP32 exponent range, so rounding is a carry into
            // the upper half; a carry out of the largest finite value lands on
            // infinity.
            return ((bits + 0x7fff + ((bits >> 16) & 1)) >> 16) as u16;
        }

        let mant_bits = self.mantissa_bits();
        let exp_field = abs >> 23;
        // value = significand * 2^(exponent - 23)
        let (exponent, significand) = if exp_field == 0 {
            (-126, abs & 0x7f_ffff)
        } else {
            (exp_field as i32 - 127, (abs & 0x7f_ffff) | 0x80_0000)
        };

        let emin = self.min_normal_exponent();
        let shift = if exponent >= emin {
            23 - mant_bits
        } else {
            23 - mant_bits + (emin - exponent) as u32
        };
        if shift > 25 {
            // Below half the smallest subnormal.
            return sign;
        }

        let mut q = significand >> shift;
        let rem = significand & ((1u32 << shift) - 1);
        let half = 1u32 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }

        let code = if exponent >= emin {
            // A carry out of the mantissa bumps the exponent field.
            (((exponent + self.bias()) as u32) << mant_bits) + q - (1 << mant_bits)
        } else {
            q
        };
        if code >= self.infinity_code() as u32 {
            return sign | self.infinity_code();
        }
        sign | code as u16
    }

    /// Exact widening conversion to FP32.
    #[inline(always)]
    pub fn upcast(self, code: u16) -> f32 {
        let mant_bits = self.mantissa_bits();
        let sign = ((code & self.sign_mask()) as u32) << 16;
        let exp_field = ((code & self.exponent_mask()) >> mant_bits) as i32;
        let frac = (code & self.mantissa_mask()) as u32;
        let max_field = (1i32 << self.exponent_bits()) - 1;

        let magnitude = if exp_field == max_field {
            if frac == 0 {
                0x7f80_0000
            } else {
                0x7fc0_0000 | (frac << (23 - mant_bits))
            }
        } else if exp_field == 0 {
            let scaled = frac as f32 * pow2(self.min_normal_exponent() - mant_bits as i32);
            scaled.to_bits()
        } else {
            let exponent = exp_field - self.bias();
            (((exponent + 127) as u32) << 23) | (frac << (23 - mant_bits))
        };
        f32::from_bits(sign | magnitude)
    }

    /// Binary logarithm of half the ULP at this code, the `l` of the
    /// splitting scheme. Zero and subnormals use the subnormal spacing.
    #[inline(always)]
    pub fn half_ulp_exponent(self, code: u16) -> i32 {
        let exp_field = ((code & self.exponent_mask()) >> self.mantissa_bits()) as i32;
        let exponent = if exp_field == 0 {
            self.min_normal_exponent()
        } else {
            exp_field - self.bias()
        };
        exponent - self.mantissa_bits() as i32 - 1
    }

    /// Spacing between adjacent representable values in this code's binade.
    pub fn ulp_of(self, code: u16) -> Result<f32> {
        if !self.is_finite_code(code) {
            return Err(Error::UlpOfNonFinite { code });
        }
        Ok(pow2(self.half_ulp_exponent(code) + 1))
    }
}

/// `2^k` as an FP32 value for `k` in `[-149, 127]`.
#[inline(always)]
pub(crate) fn pow2(k: i32) -> f32 {
    debug_assert!((-149..=127).contains(&k));
    if k >= -126 {
        f32::from_bits(((k + 127) as u32) << 23)
    } else {
        f32::from_bits(1u32 << (k + 149))
    }
}

/// `2^k` as an f64 for `k` in `[-1022, 1023]`.
#[inline(always)]
fn pow2_f64(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Round-half-even for `|x| < 2^51`. Adding and removing `1.5 * 2^52` forces
/// the hardware rounding mode onto the fraction; `round_ties_even` compiles
/// to a libm call on baseline x86-64.
#[inline(always)]
pub(crate) fn round_small(x: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    (x + MAGIC) - MAGIC
}

/// Bit width of the integer correction code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionWidth {
    Int8,
    Int16,
}

impl CorrectionWidth {
    #[inline(always)]
    pub const fn bits(self) -> u32 {
        match self {
            Self::Int8 => 8,
            Self::Int16 => 16,
        }
    }

    /// Largest code magnitude `N = 2^(b-1) - 1`.
    #[inline(always)]
    pub const fn max_code(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    /// `-2^(b-1)`, representable in storage but never produced.
    #[inline(always)]
    pub const fn forbidden_code(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub fn validate(self, rho: i32) -> Result<()> {
        let max = self.max_code();
        if rho < -max || rho > max {
            return Err(Error::InvalidCorrectionCode { code: rho, max });
        }
        Ok(())
    }
}

/// Output of [`split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub code: u16,
    pub rho: i32,
    /// The downcast overflowed to infinity; `rho` is zero.
    pub saturated: bool,
}

/// Splits a finite FP32 value into its 16-bit rounding and a correction code.
pub fn split(theta: f32, fmt: LowPrecisionFormat, width: CorrectionWidth) -> Result<Split> {
    if !theta.is_finite() {
        return Err(Error::SplitNonFinite { value: theta });
    }
    Ok(split_finite(theta, fmt, width.max_code()))
}

#[inline(always)]
pub(crate) fn split_finite(theta: f32, fmt: LowPrecisionFormat, n: i32) -> Split {
    let (code, e_norm) = normalized_error(theta, fmt);
    Split {
        code,
        rho: quantize_error(e_norm, n),
        saturated: !fmt.is_finite_code(code),
    }
}

/// The downcast code and the rounding error in units of half an ULP. The
/// error is zero when the downcast overflows.
#[inline(always)]
pub(crate) fn normalized_error(theta: f32, fmt: LowPrecisionFormat) -> (u16, f32) {
    let code = fmt.downcast(theta);
    if !fmt.is_finite_code(code) {
        return (code, 0.0);
    }
    let err = theta - fmt.upcast(code);
    let l = fmt.half_ulp_exponent(code);
    // Two steps keep each factor representable.
    let h = (-l).div_euclid(2);
    (code, (err * pow2(h)) * pow2(-l - h))
}

#[inline(always)]
pub(crate) fn quantize_error(e_norm: f32, n: i32) -> i32 {
    // The product needs up to 31 significant bits; in f64 it is exact.
    round_small(e_norm.clamp(-1.0, 1.0) as f64 * n as f64) as i32
}

/// Inverts [`split`]: `upcast(code) + (rho / N) * 2^l`.
pub fn reconstruct(
    code: u16,
    rho: i32,
    fmt: LowPrecisionFormat,
    width: CorrectionWidth,
) -> Result<f32> {
    width.validate(rho)?;
    Ok(reconstruct_unchecked(code, rho, fmt, width.max_code()))
}

#[inline(always)]
pub(crate) fn reconstruct_unchecked(code: u16, rho: i32, fmt: LowPrecisionFormat, n: i32) -> f32 {
    let base = fmt.upcast(code);
    // Adding a zero correction would turn -0 into +0.
    if rho == 0 || !fmt.is_finite_code(code) {
        return base;
    }
    // Evaluated in f64 so that the result is rounded to FP32 once.
    let e = (rho as f64 / n as f64) * pow2_f64(fmt.half_ulp_exponent(code));
    (base as f64 + e) as f32
}

/// Stores the rounding error in the same 16-bit format (the Kahan-style
/// `theta' + downcast(theta - theta')` pair) and reconstructs from it.
pub fn roundtrip_baseline(theta: f32, fmt: LowPrecisionFormat) -> Result<f32> {
    if !theta.is_finite() {
        return Err(Error::SplitNonFinite { value: theta });
    }
    Ok(roundtrip_baseline_finite(theta, fmt))
}

#[inline(always)]
pub(crate) fn roundtrip_baseline_finite(theta: f32, fmt: LowPrecisionFormat) -> f32 {
    let code = fmt.downcast(theta);
    let base = fmt.upcast(code);
    if !fmt.is_finite_code(code) {
        return base;
    }
    let residual = fmt.upcast(fmt.downcast(theta - base));
    if residual == 0.0 {
        return base;
    }
    base + residual
}

/// Plain downcast followed by upcast; no correction term.
#[inline(always)]
pub fn roundtrip_uncorrected(theta: f32, fmt: LowPrecisionFormat) -> f32 {
    fmt.upcast(fmt.downcast(theta))
}

/// Correction codes of a [`SplitTensor`], stored at their declared width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corrections {
    Int8(Vec<i8>),
    Int16(Vec<i16>),
}

impl Corrections {
    fn zeros(width: CorrectionWidth, len: usize) -> Self {
        match width {
            CorrectionWidth::Int8 => Self::Int8(vec![0; len]),
            CorrectionWidth::Int16 => Self::Int16(vec![0; len]),
        }
    }

    pub fn width(&self) -> CorrectionWidth {
        match self {
            Self::Int8(_) => CorrectionWidth::Int8,
            Self::Int16(_) => CorrectionWidth::Int16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Int8(v) => v.len(),
            Self::Int16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline(always)]
    pub fn get(&self, i: usize) -> i32 {
        match self {
            Self::Int8(v) => v[i] as i32,
            Self::Int16(v) => v[i] as i32,
        }
    }

    #[inline(always)]
    fn set(&mut self, i: usize, rho: i32) {
        match self {
            Self::Int8(v) => v[i] = rho as i8,
            Self::Int16(v) => v[i] = rho as i16,
        }
    }
}

/// Compressed master weights: 16-bit values plus integer corrections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitTensor {
    format: LowPrecisionFormat,
    lp_values: Vec<u16>,
    corrections: Corrections,
}

impl SplitTensor {
    pub fn from_f32(
        values: &[f32],
        format: LowPrecisionFormat,
        width: CorrectionWidth,
    ) -> Result<Self> {
        let mut out = Self {
            format,
            lp_values: vec![0; values.len()],
            corrections: Corrections::zeros(width, values.len()),
        };
        for (i, &v) in values.iter().enumerate() {
            out.set(i, v)?;
        }
        Ok(out)
    }

    /// Assembles a tensor from stored parts, rejecting out-of-range codes.
    pub fn from_parts(
        format: LowPrecisionFormat,
        lp_values: Vec<u16>,
        corrections: Corrections,
    ) -> Result<Self> {
        if lp_values.len() != corrections.len() {
            return Err(Error::LengthMismatch {
                expected: lp_values.len(),
                found: corrections.len(),
            });
        }
        let width = corrections.width();
        for i in 0..corrections.len() {
            width.validate(corrections.get(i))?;
        }
        Ok(Self {
            format,
            lp_values,
            corrections,
        })
    }

    pub fn format(&self) -> LowPrecisionFormat {
        self.format
    }

    pub fn width(&self) -> CorrectionWidth {
        self.corrections.width()
    }

    pub fn len(&self) -> usize {
        self.lp_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lp_values.is_empty()
    }

    pub fn lp_values(&self) -> &[u16] {
        &self.lp_values
    }

    pub fn corrections(&self) -> &Corrections {
        &self.corrections
    }

    /// Reconstructed master weight at `i`.
    #[inline(always)]
    pub fn get(&self, i: usize) -> f32 {
        reconstruct_unchecked(
            self.lp_values[i],
            self.corrections.get(i),
            self.format,
            self.width().max_code(),
        )
    }

    /// The low-precision weight at `i`, widened to FP32.
    #[inline(always)]
    pub fn lp_get(&self, i: usize) -> f32 {
        self.format.upcast(self.lp_values[i])
    }

    /// Re-splits element `i` from a new master value. Returns whether the
    /// downcast saturated.
    #[inline(always)]
    pub fn set(&mut self, i: usize, theta: f32) -> Result<bool> {
        let s = split(theta, self.format, self.width())?;
        self.lp_values[i] = s.code;
        self.corrections.set(i, s.rho);
        Ok(s.saturated)
    }

    pub fn reconstruct_into(&self, out: &mut [f32]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.get(i);
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Writes the low-precision view (what the forward pass sees).
    pub fn lp_into(&self, out: &mut [f32]) {
        for (o, &c) in out.iter_mut().zip(&self.lp_values) {
            *o = self.format.upcast(c);
        }
    }

    pub fn saturated_count(&self) -> usize {
        self.lp_values
            .iter()
            .filter(|&&c| !self.format.is_finite_code(c))
            .count()
    }
}
