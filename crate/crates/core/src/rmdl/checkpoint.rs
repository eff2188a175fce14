//! Binary checkpoint of a trained ensemble.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RMDL" version:u32
//! section(header JSON: config, classes, preprocessor, history)
//! models:u32
//! section(model record) * models
//! ```
//!
//! A section is `len:u64 bytes crc32:u32`. A model record holds the
//! architecture as JSON, the failed flag, every parameter tensor as
//! `rank:u32 dims:u64* values:f64*` and the optimizer state.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ensemble::{Ensemble, EnsembleConfig, EpochRecord, Member, Preprocessor};
use super::{ArchitectureSpec, Result};
use crate::optim::{Hyper, Optimizer, OptimizerKind};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"RMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not an RMDL checkpoint")]
    Magic,
    #[error("unsupported checkpoint version {found}")]
    Version { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch in {section}")]
    Checksum { section: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize)]
struct HeaderOut<'a> {
    config: &'a EnsembleConfig,
    classes: &'a [String],
    preprocessor: &'a Preprocessor,
    history: &'a [EpochRecord],
}

#[derive(Deserialize)]
struct HeaderIn {
    config: EnsembleConfig,
    classes: Vec<String>,
    preprocessor: Preprocessor,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    kind: OptimizerKind,
    hyper: Hyper,
    t: u64,
}

fn json<T: Serialize>(value: &T) -> CkResult<Vec<u8>> {
    serde_json::to_vec(value).map_err(|e| CheckpointError::Format(e.to_string()))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(buf, bytes.len() as u64);
    buf.extend_from_slice(bytes);
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    put_u64(buf, values.len() as u64);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_section(out: &mut impl Write, bytes: &[u8]) -> CkResult<()> {
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(bytes)?;
    out.write_all(&crc32fast::hash(bytes).to_le_bytes())?;
    Ok(())
}

fn model_record(m: &Member) -> CkResult<Vec<u8>> {
    let mut buf = Vec::new();
    put_bytes(&mut buf, &json(&m.spec)?);
    buf.push(m.failed as u8);
    let params = m.network.params();
    put_u32(&mut buf, params.len() as u32);
    for p in params {
        put_u32(&mut buf, p.rank() as u32);
        for &d in p.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_f64s(&mut buf, p.data());
    }
    let opt = &m.optimizer;
    let meta = OptimizerMeta {
        kind: opt.kind(),
        hyper: *opt.hyper(),
        t: opt.steps(),
    };
    put_bytes(&mut buf, &json(&meta)?);
    for slots in [opt.first_moments(), opt.second_moments()] {
        put_u32(&mut buf, slots.len() as u32);
        for s in slots {
            put_f64s(&mut buf, s);
        }
    }
    put_u64(&mut buf, m.id as u64);
    Ok(buf)
}

/// Writes `ensemble` to `out`. The bytes depend only on the ensemble.
pub fn save_checkpoint(ensemble: &Ensemble, mut out: impl Write) -> Result<()> {
    let header = HeaderOut {
        config: &ensemble.config,
        classes: &ensemble.classes,
        preprocessor: &ensemble.preprocessor,
        history: &ensemble.history,
    };
    out.write_all(&MAGIC).map_err(CheckpointError::from)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(CheckpointError::from)?;
    write_section(&mut out, &json(&header)?)?;
    out.write_all(&(ensemble.members.len() as u32).to_le_bytes()).map_err(CheckpointError::from)?;
    for m in &ensemble.members {
        write_section(&mut out, &model_record(m)?)?;
    }
    out.flush().map_err(CheckpointError::from)?;
    Ok(())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> CkResult<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Io(e),
    })
}

fn read_u32(input: &mut impl Read) -> CkResult<u32> {
    let mut b = [0; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> CkResult<u64> {
    let mut b = [0; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

// guards allocations against corrupt length fields
const MAX_SECTION: u64 = 1 << 34;

fn read_section(input: &mut impl Read, name: &str) -> CkResult<Vec<u8>> {
    let len = read_u64(input)?;
    if len > MAX_SECTION {
        return Err(CheckpointError::Format(format!("{name} claims {len} bytes")));
    }
    let mut bytes = Vec::new();
    input.take(len).read_to_end(&mut bytes)?;
    if bytes.len() as u64 != len {
        return Err(CheckpointError::Truncated);
    }
    if read_u32(input)? != crc32fast::hash(&bytes) {
        return Err(CheckpointError::Checksum { section: name.into() });
    }
    Ok(bytes)
}

/// Cursor over a checksummed record; any overrun is a format error since
/// the record length was already verified.
struct Record<'a> {
    bytes: &'a [u8],
    name: String,
}

impl Record<'_> {
    fn take(&mut self, n: usize) -> CkResult<&[u8]> {
        if n > self.bytes.len() {
            return Err(CheckpointError::Format(format!("{} ends early", self.name)));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> CkResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, width: usize) -> CkResult<usize> {
        let n = self.u64()?;
        if n.saturating_mul(width as u64) > self.bytes.len() as u64 {
            return Err(CheckpointError::Format(format!("{} has a bad length", self.name)));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> CkResult<&[u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn f64s(&mut self) -> CkResult<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> CkResult<T> {
        let name = self.name.clone();
        serde_json::from_slice(self.bytes()?).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))
    }
}

fn read_member(bytes: &[u8], index: usize) -> Result<Member> {
    let mut r = Record {
        bytes,
        name: format!("model {index}"),
    };
    let spec: ArchitectureSpec = r.json()?;
    let failed = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(CheckpointError::Format(format!("failed flag {v}")).into()),
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Format(format!("tensor rank {rank}")).into());
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<CkResult<Vec<_>>>()?;
        params.push(Tensor::from_values(&shape, r.f64s()?)?);
    }
    let meta: OptimizerMeta = r.json()?;
    let mut slots = [Vec::new(), Vec::new()];
    for s in &mut slots {
        let n = r.u32()? as usize;
        for _ in 0..n {
            s.push(r.f64s()?);
        }
    }
    let id = r.u64()? as usize;
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Format(format!("trailing bytes in model {index}")).into());
    }
    let mut network = spec.build()?;
    network.load_params(&params)?;
    let [first, second] = slots;
    let optimizer = Optimizer::from_parts(meta.kind, meta.hyper, meta.t, first, second)?;
    Ok(Member {
        id,
        spec,
        network,
        optimizer,
        failed,
    })
}

/// Reads an ensemble written by [`save_checkpoint`].
pub fn load_checkpoint(mut input: impl Read) -> Result<Ensemble> {
    let mut magic = [0; 4];
    match input.read_exact(&mut magic) {
        Ok(()) if magic == MAGIC => {}
        Ok(()) => return Err(CheckpointError::Magic.into()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(CheckpointError::Magic.into()),
        Err(e) => return Err(CheckpointError::Io(e).into()),
    }
    let version = read_u32(&mut input)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version }.into());
    }
    let header_bytes = read_section(&mut input, "header")?;
    let header: HeaderIn =
        serde_json::from_slice(&header_bytes).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let models = read_u32(&mut input)? as usize;
    let mut members = Vec::with_capacity(models.min(1024));
    for i in 0..models {
        let bytes = read_section(&mut input, &format!("model {i}"))?;
        members.push(read_member(&bytes, i)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(CheckpointError::from)? != 0 {
        return Err(CheckpointError::Format("trailing data".into()).into());
    }
    let mut ensemble = Ensemble::from_members(header.config, header.preprocessor, header.classes, members)?;
    ensemble.history = header.history;
    Ok(ensemble)
}
