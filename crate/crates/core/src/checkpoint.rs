//! Binary parameter snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FXF1"  u32 version  [u8; 32] config digest  u32 record count
//! per record: u32 name length, UTF-8 name, u32 ndim, u32 dims[ndim], f32 data[numel]
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Records follow registry declaration order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::tensor::Real;

pub const MAGIC: [u8; 4] = *b"FXF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_registry<T: Real>(reg: &ParamRegistry<T>, digest: [u8; 32]) -> Self {
        let records = reg
            .iter()
            .map(|(name, p)| Record {
                name: name.to_string(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Self {
            version: VERSION,
            digest,
            records,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.records.iter().map(|r| r.data.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.num_scalars() * 4);
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, self.version);
        out.extend_from_slice(&self.digest);
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_u32(&mut out, r.name.len() as u32);
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len() as u32);
            for &d in &r.shape {
                put_u32(&mut out, d as u32);
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 + 4 + 4 {
            return Err(Error::Checkpoint(format!(
                "file too short ({} bytes)",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {:?}", &bytes[..4])));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "crc mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            digest,
            records,
        })
    }

    /// Copies every record into `reg`. Names, order and shapes must match
    /// the registry exactly, as must the config digest.
    pub fn apply<T: Real>(&self, reg: &mut ParamRegistry<T>, digest: [u8; 32]) -> Result<()> {
        if self.digest != digest {
            return Err(Error::Checkpoint(
                "config digest does not match this checkpoint".into(),
            ));
        }
        if self.records.len() != reg.len() {
            return Err(Error::Checkpoint(format!(
                "{} records for {} parameters",
                self.records.len(),
                reg.len()
            )));
        }
        for (rec, name) in self
            .records
            .iter()
            .zip(reg.names().map(str::to_string).collect::<Vec<_>>())
        {
            if rec.name != name {
                return Err(Error::Checkpoint(format!(
                    "expected parameter `{name}`, found `{}`",
                    rec.name
                )));
            }
            let shape = reg.get(&name)?.shape().to_vec();
            if shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    rec.shape
                )));
            }
            reg.set(&name, rec.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        Ok(())
    }
}

pub fn save<T: Real>(path: &Path, reg: &ParamRegistry<T>, digest: [u8; 32]) -> Result<()> {
    std::fs::write(path, Checkpoint::from_registry(reg, digest).encode())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

pub fn load<T: Real>(path: &Path, reg: &mut ParamRegistry<T>, digest: [u8; 32]) -> Result<()> {
    read(path)?.apply(reg, digest)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
