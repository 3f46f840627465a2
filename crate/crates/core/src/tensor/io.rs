//! Binary tensor container shared by checkpoints, adapters and quantized exports.
//!
//! Layout (little-endian): magic `VFTN`, version `u32`, tensor count `u32`, then
//! per tensor: name (`u32` byte length + UTF-8), dtype tag `u8`
//! (0 = f32, 1 = i8, 2 = packed 4-bit), rank `u32`, dims `u64[rank]`, payload.
//! Packed 4-bit payloads hold two codes per byte, low nibble first.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VFTN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
    Packed4(Vec<u8>),
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::I8(_) => 1,
            Payload::Packed4(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn from_tensor(name: impl Into<String>, tensor: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: tensor.shape().to_vec(),
            payload: Payload::F32(tensor.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::F32(v) => Tensor::new(self.dims.clone(), v.clone()),
            _ => Err(Error::Format(format!(
                "tensor {} is not stored as f32",
                self.name
            ))),
        }
    }

    fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.tag());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
            Payload::Packed4(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected VFTN".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let count = rd.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let tag = rd.take(1)?[0];
        let rank = rd.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(rd.u64()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = match tag {
            0 => Payload::F32(
                rd.take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::I8(rd.take(numel)?.iter().map(|&b| b as i8).collect()),
            2 => Payload::Packed4(rd.take(numel.div_ceil(2))?.to_vec()),
            other => {
                return Err(Error::Format(format!(
                    "unknown dtype tag {other} for tensor {name}"
                )))
            }
        };
        let rec = Record { name, dims, payload };
        debug_assert!(rec.numel() == numel);
        records.push(rec);
    }
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - rd.pos
        )));
    }
    Ok(records)
}

pub fn write(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_sidecar(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))
        })
        .collect()
}
