//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DTTA" | version: u16
//! repeated until end of input:
//!   path_len: u32 | path: utf-8 | dtype: u8 | rank: u8 | extents: u64 × rank | data
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = u32. Records are written in path order.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DTTA";
pub const VERSION: u16 = 1;
const U32_CODE: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            RecordData::F32(_) => DType::F32.code(),
            RecordData::F64(_) => DType::F64.code(),
            RecordData::U32(_) => U32_CODE,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U32(v) => v.len(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            RecordData::F32(_) => "f32",
            RecordData::F64(_) => "f64",
            RecordData::U32(_) => "u32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn from_tensor<F: Scalar>(path: &str, t: &Tensor<F>) -> Self {
        let data = match F::DTYPE {
            DType::F32 => RecordData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => RecordData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Record {
            path: path.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Reinterprets the record as a tensor of the run's precision.
    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>> {
        let values: Vec<F> = match (&self.data, F::DTYPE) {
            (RecordData::F32(v), DType::F32) => v.iter().map(|&x| F::of(x as f64)).collect(),
            (RecordData::F64(v), DType::F64) => v.iter().map(|&x| F::of(x)).collect(),
            (other, expected) => {
                return Err(Error::PrecisionMismatch {
                    expected: expected.name(),
                    found: other.type_name(),
                })
            }
        };
        Tensor::new(self.shape.clone(), values)
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.path.len() as u32).to_le_bytes());
        out.extend_from_slice(r.path.as_bytes());
        out.push(r.data.code());
        out.push(r.shape.len() as u8);
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.data {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let path_len = r.u32("path length")? as usize;
        let path = std::str::from_utf8(r.take(path_len, "path")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                reason: "path is not utf-8".into(),
            })?
            .to_string();
        let code_at = r.pos;
        let code = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format {
                offset: code_at,
                reason: "extent product overflows".into(),
            })?;
        let data = match code {
            1 => RecordData::F32(
                r.take(numel.saturating_mul(4), "f32 payload")?
                    .chunks_exact(4)
                    .map(f32::read_le)
                    .collect(),
            ),
            2 => RecordData::F64(
                r.take(numel.saturating_mul(8), "f64 payload")?
                    .chunks_exact(8)
                    .map(f64::read_le)
                    .collect(),
            ),
            U32_CODE => RecordData::U32(
                r.take(numel.saturating_mul(4), "u32 payload")?
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            other => {
                return Err(Error::Format {
                    offset: code_at,
                    reason: format!("unknown dtype code {other}"),
                })
            }
        };
        debug_assert_eq!(data.len(), numel);
        records.push(Record { path, shape, data });
    }
    Ok(records)
}

pub fn save_checkpoint<F: Scalar>(store: &ParamStore<F>) -> Vec<u8> {
    let records: Vec<Record> = store
        .iter()
        .map(|(path, p)| Record::from_tensor(path, &p.tensor))
        .collect();
    encode(&records)
}

pub fn load_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<ParamStore<F>> {
    let mut store = ParamStore::new();
    for rec in decode(bytes)? {
        let t = rec.to_tensor::<F>()?;
        store.insert(rec.path, t)?;
    }
    Ok(store)
}

/// Splits a store into the entries whose path starts with `prefix` and the rest.
pub fn split_store<F: Scalar>(store: ParamStore<F>, prefix: &str) -> Result<(ParamStore<F>, ParamStore<F>)> {
    let (mut hit, mut miss) = (ParamStore::new(), ParamStore::new());
    for (path, p) in store.iter() {
        let target = if path.starts_with(prefix) { &mut hit } else { &mut miss };
        target.insert(path, p.tensor.clone())?;
    }
    Ok((hit, miss))
}
