//! Binary tensor container used for checkpoints and encoded samples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BEVDATEN"
//! version  u8       = 1
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), ndim u32, dims u32 * ndim,
//!          data f32 * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{GradError, Result};

pub const MAGIC: &[u8; 8] = b"BEVDATEN";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(GradError::Format(format!(
                "record {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| GradError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GradError::Format("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(GradError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| GradError::Format("record name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| GradError::Format(format!("record {name}: shape overflow")))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| GradError::Format("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(GradError::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(records)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}
