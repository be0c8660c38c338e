//! Exhaustive reconstruction-error sweep over every finite FP32 bit pattern.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatcodec::{
    normalized_error, quantize_error, reconstruct_unchecked, roundtrip_baseline_finite,
    CorrectionWidth, LowPrecisionFormat,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepScheme {
    /// Split with an 8-bit correction.
    Ulp8,
    /// Split with a 16-bit correction.
    Ulp16,
    /// Downcast and upcast, nothing else.
    None,
    /// Rounding error stored in the same 16-bit format.
    SameFormatBaseline,
}

impl SweepScheme {
    pub const ALL: [SweepScheme; 4] = [Self::Ulp8, Self::Ulp16, Self::None, Self::SameFormatBaseline];

    pub const fn name(self) -> &'static str {
        match self {
            Self::Ulp8 => "ulp8",
            Self::Ulp16 => "ulp16",
            Self::None => "none",
            Self::SameFormatBaseline => "same-format-baseline",
        }
    }

    const fn slot(self) -> usize {
        match self {
            Self::Ulp8 => 0,
            Self::Ulp16 => 1,
            Self::None => 2,
            Self::SameFormatBaseline => 3,
        }
    }
}

impl std::str::FromStr for SweepScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep scheme {s:?}")))
    }
}

/// Where a swept value is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BucketKey {
    Zero,
    Subnormal,
    /// Unbiased FP32 exponent of a normal value.
    Exponent(i32),
    /// The downcast rounded to infinity.
    Overflow,
}

impl BucketKey {
    const COUNT: usize = 257;

    fn index(self) -> usize {
        match self {
            Self::Zero => 0,
            Self::Subnormal => 1,
            Self::Exponent(e) => (e + 128) as usize,
            Self::Overflow => 256,
        }
    }

    fn from_index(i: usize) -> Self {
        match i {
            0 => Self::Zero,
            1 => Self::Subnormal,
            256 => Self::Overflow,
            _ => Self::Exponent(i as i32 - 128),
        }
    }

    pub fn label(self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::Subnormal => "subnormal".into(),
            Self::Exponent(e) => e.to_string(),
            Self::Overflow => "overflow".into(),
        }
    }
}

impl Serialize for BucketKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

/// Raw counters for one bucket. Merging is plain addition, so any fixed
/// merge order gives the same result.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Tally {
    count: u64,
    exact: u64,
    /// Values whose downcast is a normal number of the target format.
    lp_normal: u64,
    lp_normal_exact: u64,
    rel_err_sum: f64,
    max_rel_err: f64,
}

impl Tally {
    #[inline(always)]
    fn add(&mut self, theta: f32, approx: f32, lp_normal: bool) {
        let exact = theta.to_bits() == approx.to_bits();
        self.count += 1;
        self.exact += exact as u64;
        self.lp_normal += lp_normal as u64;
        self.lp_normal_exact += (lp_normal && exact) as u64;
        if !exact && theta != 0.0 {
            let rel = (approx as f64 - theta as f64).abs() / (theta as f64).abs();
            self.rel_err_sum += rel;
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.count += other.count;
        self.exact += other.exact;
        self.lp_normal += other.lp_normal;
        self.lp_normal_exact += other.lp_normal_exact;
        self.rel_err_sum += other.rel_err_sum;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepBucket {
    pub exponent: BucketKey,
    pub count: u64,
    /// Mean of `|approx - theta| / |theta|`; zero for the zero bucket, which
    /// is tracked by exactness only.
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub exact_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub format: LowPrecisionFormat,
    pub scheme: SweepScheme,
    /// Every finite bit pattern in the swept domain.
    pub visited: u64,
    /// Values whose downcast overflowed; excluded from the fields below.
    pub overflow: u64,
    /// Bitwise-exact fraction over all values with a finite downcast.
    pub exact_fraction: f64,
    /// Bitwise-exact fraction over values whose downcast is normal.
    pub exact_fraction_normal: f64,
    /// Mean relative error over non-zero values with a finite downcast.
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub summary: SweepSummary,
    pub buckets: Vec<SweepBucket>,
}

impl SweepResult {
    /// One row per non-empty bucket.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("exponent,count,mean_rel_err,max_rel_err,exact_fraction\n");
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{}",
                b.exponent.label(),
                b.count,
                b.mean_rel_err,
                b.max_rel_err,
                b.exact_fraction
            );
        }
        out
    }

    pub fn bucket(&self, key: BucketKey) -> Option<&SweepBucket> {
        self.buckets.iter().find(|b| b.exponent == key)
    }
}

/// Which FP32 exponent fields to visit, for both signs. The full domain is
/// `0..=254`; field 255 (infinities and NaNs) is never visited.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepDomain {
    pub exponent_fields: RangeInclusive<u32>,
}

impl Default for SweepDomain {
    fn default() -> Self {
        Self {
            exponent_fields: 0..=254,
        }
    }
}

impl SweepDomain {
    pub fn validate(&self) -> Result<()> {
        if self.exponent_fields.is_empty() || *self.exponent_fields.end() > 254 {
            return Err(Error::InvalidConfig(format!(
                "exponent field range {:?} must be non-empty within 0..=254",
                self.exponent_fields
            )));
        }
        Ok(())
    }

    pub fn value_count(&self) -> u64 {
        let fields = (self.exponent_fields.end() - self.exponent_fields.start() + 1) as u64;
        (2 * fields) << 23
    }
}

const CHUNK_BITS: u32 = 20;
const CHUNK_LEN: u32 = 1 << CHUNK_BITS;
const SCHEMES: usize = 4;

/// Partial result of one chunk. All values in a chunk share a sign and an
/// exponent field, hence a bucket, except for overflow and the zero pattern.
#[derive(Clone, Copy, Default)]
struct ChunkTally {
    main: [Tally; SCHEMES],
    overflow: [Tally; SCHEMES],
    zero: [Tally; SCHEMES],
}

#[inline(always)]
fn sweep_chunk(fmt: LowPrecisionFormat, start: u32, active: [bool; SCHEMES]) -> ChunkTally {
    let mut t = ChunkTally::default();
    let n8 = CorrectionWidth::Int8.max_code();
    let n16 = CorrectionWidth::Int16.max_code();
    for bits in start..start + CHUNK_LEN {
        let theta = f32::from_bits(bits);
        let (code, e_norm) = normalized_error(theta, fmt);
        let (slot, lp_normal) = if !fmt.is_finite_code(code) {
            (&mut t.overflow, false)
        } else if bits & 0x7fff_ffff == 0 {
            (&mut t.zero, false)
        } else {
            (&mut t.main, fmt.is_normal_code(code))
        };
        if active[0] {
            let rho = quantize_error(e_norm, n8);
            slot[0].add(theta, reconstruct_unchecked(code, rho, fmt, n8), lp_normal);
        }
        if active[1] {
            let rho = quantize_error(e_norm, n16);
            slot[1].add(theta, reconstruct_unchecked(code, rho, fmt, n16), lp_normal);
        }
        if active[2] {
            slot[2].add(theta, fmt.upcast(code), lp_normal);
        }
        if active[3] {
            slot[3].add(theta, roundtrip_baseline_finite(theta, fmt), lp_normal);
        }
    }
    t
}

fn chunk_key(start: u32) -> BucketKey {
    let field = (start >> 23) & 0xff;
    let mant = start & 0x7f_ffff;
    match field {
        0 if mant == 0 => BucketKey::Zero,
        0 => BucketKey::Subnormal,
        f => BucketKey::Exponent(f as i32 - 127),
    }
}

/// Sweeps every finite FP32 value in `domain` under each of `schemes`, using
/// `workers` threads (0 lets the pool decide). The output is independent of
/// the worker count: chunks are fixed and merged in chunk order.
pub fn sweep(
    fmt: LowPrecisionFormat,
    schemes: &[SweepScheme],
    domain: &SweepDomain,
    workers: usize,
) -> Result<Vec<SweepResult>> {
    domain.validate()?;
    if schemes.is_empty() {
        return Err(Error::InvalidConfig("no sweep scheme selected".into()));
    }
    let mut active = [false; SCHEMES];
    for s in schemes {
        active[s.slot()] = true;
    }

    let mut chunks = Vec::new();
    for sign in [0u32, 0x8000_0000] {
        for field in domain.exponent_fields.clone() {
            let base = sign | (field << 23);
            for c in 0..(1u32 << (23 - CHUNK_BITS)) {
                chunks.push(base + c * CHUNK_LEN);
            }
        }
    }

    let run = || -> Vec<ChunkTally> {
        chunks
            .par_iter()
            .map(|&start| match fmt {
                // Spelled out per format so each loop is compiled for a
                // constant format.
                LowPrecisionFormat::Bf16 => sweep_chunk(LowPrecisionFormat::Bf16, start, active),
                LowPrecisionFormat::Fp16 => sweep_chunk(LowPrecisionFormat::Fp16, start, active),
            })
            .collect()
    };
    let partials = if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?
            .install(run)
    };

    let mut table = vec![[Tally::default(); SCHEMES]; BucketKey::COUNT];
    for (&start, t) in chunks.iter().zip(&partials) {
        let key = match chunk_key(start) {
            BucketKey::Zero => BucketKey::Subnormal,
            k => k,
        };
        for k in 0..SCHEMES {
            table[key.index()][k].merge(&t.main[k]);
            table[BucketKey::Overflow.index()][k].merge(&t.overflow[k]);
            table[BucketKey::Zero.index()][k].merge(&t.zero[k]);
        }
    }

    Ok(schemes
        .iter()
        .map(|&scheme| summarize(fmt, scheme, domain, &table, scheme.slot()))
        .collect())
}

fn summarize(
    fmt: LowPrecisionFormat,
    scheme: SweepScheme,
    domain: &SweepDomain,
    table: &[[Tally; SCHEMES]],
    k: usize,
) -> SweepResult {
    let mut buckets = Vec::new();
    let mut finite = Tally::default();
    let mut nonzero = 0u64;
    for (i, row) in table.iter().enumerate() {
        let t = &row[k];
        if t.count == 0 {
            continue;
        }
        let key = BucketKey::from_index(i);
        if key != BucketKey::Overflow {
            finite.merge(t);
            if key != BucketKey::Zero {
                nonzero += t.count;
            }
        }
        let zero_bucket = key == BucketKey::Zero;
        buckets.push(SweepBucket {
            exponent: key,
            count: t.count,
            mean_rel_err: if zero_bucket { 0.0 } else { t.rel_err_sum / t.count as f64 },
            max_rel_err: if zero_bucket { 0.0 } else { t.max_rel_err },
            exact_fraction: t.exact as f64 / t.count as f64,
        });
    }
    let overflow = table[BucketKey::Overflow.index()][k].count;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    SweepResult {
        summary: SweepSummary {
            format: fmt,
            scheme,
            visited: domain.value_count(),
            overflow,
            exact_fraction: ratio(finite.exact, finite.count),
            exact_fraction_normal: ratio(finite.lp_normal_exact, finite.lp_normal),
            mean_rel_err: if nonzero == 0 { 0.0 } else { finite.rel_err_sum / nonzero as f64 },
            max_rel_err: finite.max_rel_err,
        },
        buckets,
    }
}

/// Sweeps the whole FP32 range under one scheme.
pub fn exhaustive_sweep(
    fmt: LowPrecisionFormat,
    scheme: SweepScheme,
    workers: usize,
) -> Result<SweepResult> {
    Ok(sweep(fmt, &[scheme], &SweepDomain::default(), workers)?.remove(0))
}

/// Buckets where `finer.mean_rel_err > coarser.mean_rel_err`.
pub fn dominance_violations(finer: &SweepResult, coarser: &SweepResult) -> Vec<BucketKey> {
    finer
        .buckets
        .iter()
        .filter(|b| {
            coarser
                .bucket(b.exponent)
                .is_some_and(|c| b.mean_rel_err > c.mean_rel_err)
        })
        .map(|b| b.exponent)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn narrow(lo: u32, hi: u32) -> SweepDomain {
        SweepDomain {
            exponent_fields: lo..=hi,
        }
    }

    #[test]
    fn bucket_keys_roundtrip() {
        for i in 0..BucketKey::COUNT {
            assert_eq!(BucketKey::from_index(i).index(), i);
        }
        assert_eq!(BucketKey::Exponent(-126).index(), 2);
        assert_eq!(BucketKey::Exponent(127).index(), 255);
        assert_eq!(chunk_key(0x3f80_0000), BucketKey::Exponent(0));
        assert_eq!(chunk_key(0x8000_0000), BucketKey::Zero);
    }

    #[test]
    fn counts_cover_domain() {
        let d = narrow(0, 0);
        let r = sweep(LowPrecisionFormat::Bf16, &[SweepScheme::None], &d, 1).unwrap();
        let total: u64 = r[0].buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, d.value_count());
        assert_eq!(r[0].bucket(BucketKey::Zero).unwrap().count, 2);
        assert_eq!(r[0].bucket(BucketKey::Zero).unwrap().exact_fraction, 1.0);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let d = narrow(126, 127);
        let a = sweep(LowPrecisionFormat::Bf16, &SweepScheme::ALL, &d, 1).unwrap();
        let b = sweep(LowPrecisionFormat::Bf16, &SweepScheme::ALL, &d, 3).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_csv(), y.to_csv());
        }
    }

    #[test]
    fn uncorrected_bf16_is_half_ulp_bounded() {
        let d = narrow(100, 101);
        let r = sweep(LowPrecisionFormat::Bf16, &[SweepScheme::None], &d, 0).unwrap();
        for b in &r[0].buckets {
            assert!(b.max_rel_err <= 2f64.powi(-8), "{b:?}");
        }
    }

    #[test]
    fn fp16_overflow_is_separate() {
        // Field 142 is [2^15, 2^16): values from 65520 upward round to infinity.
        let d = narrow(142, 142);
        let r = sweep(LowPrecisionFormat::Fp16, &[SweepScheme::Ulp16], &d, 0).unwrap();
        let over = r[0].bucket(BucketKey::Overflow).unwrap().count;
        assert_eq!(over, 2 * ((0x477f_ffff - 0x477f_f000) + 1));
        assert_eq!(r[0].summary.overflow, over);
        assert_eq!(r[0].summary.exact_fraction_normal, 1.0);
    }

    #[test]
    fn scheme_names_parse() {
        for s in SweepScheme::ALL {
            assert_eq!(s.name().parse::<SweepScheme>().unwrap(), s);
        }
        assert!("ulp4".parse::<SweepScheme>().is_err());
    }
}
