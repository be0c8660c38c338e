//! Binary checkpoint container for optimizer states and recorded trajectories.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FLOP"  version:u16  count:u32
//! count x { name_len:u16 name:utf8 dtype:u8 rank:u8 dims:u64*rank payload }
//! crc32:u32   (over every preceding byte)
//! ```
//!
//! A state stored under prefix `p` is a set of tensor records named `p.*`
//! plus two metadata records, `meta.p.layout` (JSON) and `meta.p.step`
//! (the step counter as 8 bytes). Metadata records are not counted as state
//! payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatcodec::{CorrectionWidth, Corrections, LowPrecisionFormat, SplitTensor};
use crate::optimizers::{
    FlashState, Mode, OptimizerKind, OptimizerState, ReferenceState,
};
use crate::statequant::{GroupSpec, QuantizedState, StateCodes, StateKind};
use crate::trainbench::{Snapshot, Trajectory};

pub const MAGIC: [u8; 4] = *b"FLOP";
pub const VERSION: u16 = 1;

const META_PREFIX: &str = "meta.";
const TRAJECTORY_META: &str = "meta.trajectory";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    Bf16 = 1,
    F16 = 2,
    I8 = 3,
    U8 = 4,
    I16 = 5,
}

impl DType {
    pub const fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::Bf16 | Self::F16 | Self::I16 => 2,
            Self::I8 | Self::U8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::Bf16 => "bf16",
            Self::F16 => "f16",
            Self::I8 => "i8",
            Self::U8 => "u8",
            Self::I16 => "i16",
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Self::F32,
            1 => Self::Bf16,
            2 => Self::F16,
            3 => Self::I8,
            4 => Self::U8,
            5 => Self::I16,
            t => return Err(Error::Malformed(format!("unknown dtype tag {t}"))),
        })
    }

    fn of_format(fmt: LowPrecisionFormat) -> Self {
        match fmt {
            LowPrecisionFormat::Bf16 => Self::Bf16,
            LowPrecisionFormat::Fp16 => Self::F16,
        }
    }
}

/// One named tensor with its little-endian payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn is_metadata(&self) -> bool {
        self.name.starts_with(META_PREFIX)
    }

    fn vector(name: String, dtype: DType, len: usize, payload: Vec<u8>) -> Self {
        Self {
            name,
            dtype,
            dims: vec![len as u64],
            payload,
        }
    }

    fn f32s(name: String, v: &[f32]) -> Self {
        Self::vector(name, DType::F32, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    fn u16s(name: String, dtype: DType, v: &[u16]) -> Self {
        Self::vector(name, dtype, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    fn i16s(name: String, v: &[i16]) -> Self {
        Self::vector(name, DType::I16, v.len(), v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    fn i8s(name: String, v: &[i8]) -> Self {
        Self::vector(name, DType::I8, v.len(), v.iter().map(|&x| x as u8).collect())
    }

    fn bytes(name: String, v: Vec<u8>) -> Self {
        Self::vector(name, DType::U8, v.len(), v)
    }

    fn expect(&self, dtype: DType) -> Result<()> {
        if self.dtype != dtype {
            return Err(Error::Malformed(format!(
                "{} has dtype {}, expected {}",
                self.name,
                self.dtype.name(),
                dtype.name()
            )));
        }
        Ok(())
    }

    fn to_f32s(&self) -> Result<Vec<f32>> {
        self.expect(DType::F32)?;
        Ok(self
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn to_u16s(&self, dtype: DType) -> Result<Vec<u16>> {
        self.expect(dtype)?;
        Ok(self
            .payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn to_i16s(&self) -> Result<Vec<i16>> {
        self.expect(DType::I16)?;
        Ok(self
            .payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn to_i8s(&self) -> Result<Vec<i8>> {
        self.expect(DType::I8)?;
        Ok(self.payload.iter().map(|&b| b as i8).collect())
    }

    fn to_u8s(&self) -> Result<Vec<u8>> {
        self.expect(DType::U8)?;
        Ok(self.payload.clone())
    }
}

/// Serializes records into the container format, CRC included.
pub fn write_records(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Malformed("more than u32::MAX records".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let name_len = u16::try_from(r.name.len())
            .map_err(|_| Error::Malformed(format!("record name of {} bytes", r.name.len())))?;
        let rank = u8::try_from(r.dims.len())
            .map_err(|_| Error::Malformed(format!("{} has rank {}", r.name, r.dims.len())))?;
        if r.elements() as usize * r.dtype.width() != r.payload.len() {
            return Err(Error::Malformed(format!(
                "{}: payload of {} bytes does not match its shape",
                r.name,
                r.payload.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dtype as u8);
        out.push(rank);
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&r.payload);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and verifies a container. Structure is checked before the CRC so
/// that a short file reports truncation.
pub fn read_records(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated);
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let body_len = bytes.len().checked_sub(4).ok_or(Error::Truncated)?;
    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: 4,
    };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?
            .to_owned();
        let dtype = DType::from_tag(r.u8()?)?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let size = dims
            .iter()
            .try_fold(dtype.width() as u64, |acc, &d| acc.checked_mul(d))
            .and_then(|s| usize::try_from(s).ok())
            .ok_or_else(|| Error::Malformed(format!("{name}: shape {dims:?} overflows")))?;
        let payload = r.take(size)?.to_vec();
        records.push(TensorRecord {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if r.pos != body_len {
        // Either trailing garbage or a file cut inside the CRC.
        if body_len - r.pos < 4 && bytes.len() < r.pos + 4 {
            return Err(Error::Truncated);
        }
        return Err(Error::Malformed(format!(
            "{} unexpected bytes after the last record",
            body_len - r.pos
        )));
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateLayout {
    optimizer: OptimizerKind,
    mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<LowPrecisionFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    correction: Option<CorrectionWidth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<StateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance: Option<StateKind>,
}

fn quantized_records(prefix: &str, q: &QuantizedState, out: &mut Vec<TensorRecord>) {
    let codes = format!("{prefix}.codes");
    out.push(match q.codes() {
        StateCodes::Signed(c) => TensorRecord::i8s(codes, c),
        StateCodes::Unsigned(c) => TensorRecord::bytes(codes, c.clone()),
    });
    out.push(TensorRecord::u16s(format!("{prefix}.scales"), DType::F16, q.scales()));
}

fn state_records(prefix: &str, state: &OptimizerState) -> Result<Vec<TensorRecord>> {
    let mut out = Vec::new();
    let layout = match state {
        OptimizerState::Reference(s) => {
            out.push(TensorRecord::f32s(format!("{prefix}.weights"), &s.weights));
            out.push(TensorRecord::f32s(format!("{prefix}.momentum"), &s.momentum));
            if let Some(v) = &s.variance {
                out.push(TensorRecord::f32s(format!("{prefix}.variance"), v));
            }
            StateLayout {
                optimizer: s.kind(),
                mode: Mode::Reference,
                format: None,
                correction: None,
                group_size: None,
                momentum: None,
                variance: None,
            }
        }
        OptimizerState::Flash(s) => {
            let fmt = s.weights.format();
            out.push(TensorRecord::u16s(
                format!("{prefix}.weights"),
                DType::of_format(fmt),
                s.weights.lp_values(),
            ));
            let corr = format!("{prefix}.correction");
            out.push(match s.weights.corrections() {
                Corrections::Int8(c) => TensorRecord::i8s(corr, c),
                Corrections::Int16(c) => TensorRecord::i16s(corr, c),
            });
            quantized_records(&format!("{prefix}.momentum"), &s.momentum, &mut out);
            if let Some(v) = &s.variance {
                quantized_records(&format!("{prefix}.variance"), v, &mut out);
            }
            StateLayout {
                optimizer: s.kind(),
                mode: Mode::Flash,
                format: Some(fmt),
                correction: Some(s.weights.width()),
                group_size: Some(s.momentum.spec().group_size()),
                momentum: Some(s.momentum.kind()),
                variance: s.variance.as_ref().map(QuantizedState::kind),
            }
        }
    };
    let json = serde_json::to_vec(&layout).map_err(|e| Error::Malformed(e.to_string()))?;
    out.insert(0, TensorRecord::bytes(format!("{META_PREFIX}{prefix}.layout"), json));
    out.insert(
        1,
        TensorRecord::bytes(
            format!("{META_PREFIX}{prefix}.step"),
            state.step_count().to_le_bytes().to_vec(),
        ),
    );
    Ok(out)
}

/// Encodes named states; names must be unique and non-empty.
pub fn encode_states(states: &[(&str, &OptimizerState)]) -> Result<Vec<u8>> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (name, state) in states {
        if name.is_empty() || !seen.insert(*name) {
            return Err(Error::Malformed(format!("state name {name:?} is empty or repeated")));
        }
        records.extend(state_records(name, state)?);
    }
    write_records(&records)
}

struct RecordPool(BTreeMap<String, TensorRecord>);

impl RecordPool {
    fn take(&mut self, name: &str) -> Result<TensorRecord> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Malformed(format!("missing record {name}")))
    }

    fn take_quantized(&mut self, prefix: &str, kind: StateKind, spec: GroupSpec) -> Result<QuantizedState> {
        let codes = self.take(&format!("{prefix}.codes"))?;
        let codes = if kind.is_signed() {
            StateCodes::Signed(codes.to_i8s()?)
        } else {
            StateCodes::Unsigned(codes.to_u8s()?)
        };
        let scales = self.take(&format!("{prefix}.scales"))?.to_u16s(DType::F16)?;
        QuantizedState::from_parts(kind, spec, codes, scales)
    }
}

fn decode_state(prefix: &str, layout: &StateLayout, step: u64, pool: &mut RecordPool) -> Result<OptimizerState> {
    let missing = |what: &str| Error::Malformed(format!("{prefix}: layout lacks {what}"));
    Ok(match layout.mode {
        Mode::Reference => {
            let weights = pool.take(&format!("{prefix}.weights"))?.to_f32s()?;
            let momentum = pool.take(&format!("{prefix}.momentum"))?.to_f32s()?;
            let variance = if layout.optimizer.has_variance() {
                Some(pool.take(&format!("{prefix}.variance"))?.to_f32s()?)
            } else {
                None
            };
            OptimizerState::Reference(ReferenceState::from_parts(
                layout.optimizer,
                weights,
                momentum,
                variance,
                step,
            )?)
        }
        Mode::Flash => {
            let fmt = layout.format.ok_or_else(|| missing("format"))?;
            let width = layout.correction.ok_or_else(|| missing("correction"))?;
            let spec = GroupSpec::new(layout.group_size.ok_or_else(|| missing("group_size"))?)?;
            let lp = pool
                .take(&format!("{prefix}.weights"))?
                .to_u16s(DType::of_format(fmt))?;
            let corr = pool.take(&format!("{prefix}.correction"))?;
            let corrections = match width {
                CorrectionWidth::Int8 => Corrections::Int8(corr.to_i8s()?),
                CorrectionWidth::Int16 => Corrections::Int16(corr.to_i16s()?),
            };
            let weights = SplitTensor::from_parts(fmt, lp, corrections)?;
            let m_kind = layout.momentum.ok_or_else(|| missing("momentum"))?;
            let momentum = pool.take_quantized(&format!("{prefix}.momentum"), m_kind, spec)?;
            let variance = match layout.variance {
                Some(kind) => Some(pool.take_quantized(&format!("{prefix}.variance"), kind, spec)?),
                None => None,
            };
            OptimizerState::Flash(FlashState::from_parts(
                layout.optimizer,
                weights,
                momentum,
                variance,
                step,
            )?)
        }
    })
}

/// Decodes every state in the container, in the order they were saved.
pub fn decode_states(bytes: &[u8]) -> Result<Vec<(String, OptimizerState)>> {
    let records = read_records(bytes)?;
    let prefixes: Vec<String> = records
        .iter()
        .filter_map(|r| {
            r.name
                .strip_prefix(META_PREFIX)?
                .strip_suffix(".layout")
                .map(str::to_owned)
        })
        .collect();
    let mut pool = RecordPool(BTreeMap::new());
    for r in records {
        if pool.0.insert(r.name.clone(), r).is_some() {
            return Err(Error::Malformed("duplicate record name".into()));
        }
    }
    let mut out = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let layout: StateLayout = serde_json::from_slice(
            &pool.take(&format!("{META_PREFIX}{prefix}.layout"))?.to_u8s()?,
        )
        .map_err(|e| Error::Malformed(format!("{prefix}: layout: {e}")))?;
        let step_bytes = pool.take(&format!("{META_PREFIX}{prefix}.step"))?.to_u8s()?;
        let step = u64::from_le_bytes(
            step_bytes
                .try_into()
                .map_err(|_| Error::Malformed(format!("{prefix}: step is not 8 bytes")))?,
        );
        let state = decode_state(&prefix, &layout, step, &mut pool)?;
        out.push((prefix, state));
    }
    if let Some(name) = pool.0.keys().next() {
        return Err(Error::Malformed(format!("record {name} belongs to no state")));
    }
    Ok(out)
}

/// Writes `states` to `path`; returns the file size in bytes.
pub fn save_checkpoint(path: impl AsRef<Path>, states: &[(&str, &OptimizerState)]) -> Result<u64> {
    let bytes = encode_states(states)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, OptimizerState)>> {
    decode_states(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordInfo {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub version: u16,
    pub records: Vec<RecordInfo>,
    /// Sum of `width * elements` over non-metadata records.
    pub payload_bytes: u64,
    pub metadata_bytes: u64,
    pub file_bytes: u64,
}

/// Verifies a container and tabulates its records.
pub fn inspect(bytes: &[u8]) -> Result<CheckpointInfo> {
    let records = read_records(bytes)?;
    let mut info = CheckpointInfo {
        version: VERSION,
        records: Vec::with_capacity(records.len()),
        payload_bytes: 0,
        metadata_bytes: 0,
        file_bytes: bytes.len() as u64,
    };
    for r in records {
        let size = r.payload.len() as u64;
        if r.is_metadata() {
            info.metadata_bytes += size;
        } else {
            info.payload_bytes += size;
        }
        info.records.push(RecordInfo {
            bytes: size,
            name: r.name,
            dtype: r.dtype,
            dims: r.dims,
        });
    }
    Ok(info)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryMeta {
    optimizer: OptimizerKind,
    tensor_lens: Vec<usize>,
    steps: Vec<u64>,
    has_variance: bool,
}

pub fn encode_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    let meta = TrajectoryMeta {
        optimizer: t.optimizer,
        tensor_lens: t.tensor_lens.clone(),
        steps: t.snapshots.iter().map(|s| s.step).collect(),
        has_variance: t.snapshots.first().is_some_and(|s| s.variance.is_some()),
    };
    if t.snapshots.iter().any(|s| s.variance.is_some() != meta.has_variance) {
        return Err(Error::Malformed("snapshots disagree on the variance buffer".into()));
    }
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Malformed(e.to_string()))?;
    let mut records = vec![TensorRecord::bytes(TRAJECTORY_META.into(), json)];
    for (i, s) in t.snapshots.iter().enumerate() {
        records.push(TensorRecord::f32s(format!("snapshot{i}.momentum"), &s.momentum));
        if let Some(v) = &s.variance {
            records.push(TensorRecord::f32s(format!("snapshot{i}.variance"), v));
        }
    }
    write_records(&records)
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut pool = RecordPool(
        read_records(bytes)?
            .into_iter()
            .map(|r| (r.name.clone(), r))
            .collect(),
    );
    let meta: TrajectoryMeta = serde_json::from_slice(&pool.take(TRAJECTORY_META)?.to_u8s()?)
        .map_err(|e| Error::Malformed(format!("trajectory metadata: {e}")))?;
    let mut snapshots = Vec::with_capacity(meta.steps.len());
    for (i, &step) in meta.steps.iter().enumerate() {
        let momentum = pool.take(&format!("snapshot{i}.momentum"))?.to_f32s()?;
        let variance = if meta.has_variance {
            Some(pool.take(&format!("snapshot{i}.variance"))?.to_f32s()?)
        } else {
            None
        };
        snapshots.push(Snapshot {
            step,
            momentum,
            variance,
        });
    }
    if let Some(name) = pool.0.keys().next() {
        return Err(Error::Malformed(format!("unexpected record {name}")));
    }
    Ok(Trajectory {
        optimizer: meta.optimizer,
        tensor_lens: meta.tensor_lens,
        snapshots,
    })
}

pub fn save_trajectory(path: impl AsRef<Path>, t: &Trajectory) -> Result<u64> {
    let bytes = encode_trajectory(t)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    decode_trajectory(&std::fs::read(path)?)
}
