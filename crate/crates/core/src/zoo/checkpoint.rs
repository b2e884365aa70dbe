//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CSNW" version
//! repeated until end of file:
//!   name_len name_bytes rank dim[0..rank] f32[product(dims)]
//! ```
//!
//! Records follow [`Model::tensors`] order and include BN running statistics.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor5};

pub const MAGIC: &[u8; 4] = b"CSNW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        let count: usize = r.dims.iter().product();
        if count != r.data.len() {
            return Err(Error::Format(format!("record `{}`: dims {:?} hold {count} values, got {}", r.name, r.dims, r.data.len())));
        }
        put_u32(&mut out, r.name.len(), "name length")?;
        out.extend_from_slice(r.name.as_bytes());
        put_u32(&mut out, r.dims.len(), "rank")?;
        for &d in &r.dims {
            put_u32(&mut out, d, "dimension")?;
        }
        out.reserve(4 * r.data.len());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Size(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")?;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")?;
        if rank > 8 {
            return Err(Error::Format(format!("record `{name}`: rank {rank}")));
        }
        let dims = (0..rank).map(|_| c.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("record `{name}`: dims {dims:?} overflow")))?;
        let data = c
            .take(count, &format!("data of `{name}`"))?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

/// Every tensor of the model as `f32` records.
pub fn records<T: Scalar>(model: &Model<T>) -> Vec<Record> {
    model
        .tensors()
        .into_iter()
        .map(|(name, _, t)| Record {
            name,
            dims: t.shape().dims().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect()
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    encode(&records(model))
}

/// Overwrite the model's tensors from records. Every tensor must be present
/// exactly once with a matching shape; unknown names are rejected.
pub fn load_records<T: Scalar>(model: &mut Model<T>, records: &[Record]) -> Result<()> {
    let mut by_name = std::collections::HashMap::with_capacity(records.len());
    for r in records {
        if by_name.insert(r.name.as_str(), r).is_some() {
            return Err(Error::Format(format!("duplicate record `{}`", r.name)));
        }
    }
    let mut tensors = model.tensors_mut();
    if tensors.len() != records.len() {
        let known: std::collections::HashSet<_> = tensors.iter().map(|t| t.0.clone()).collect();
        if let Some(extra) = records.iter().find(|r| !known.contains(&r.name)) {
            return Err(Error::Format(format!("checkpoint has unknown tensor `{}`", extra.name)));
        }
    }
    for (name, _, t) in tensors.iter_mut() {
        let r = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint is missing `{name}`")))?;
        let dims: [usize; 5] = r
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("`{name}` has rank {}", r.dims.len())))?;
        if dims != t.shape().dims() {
            return Err(Error::Shape(format!("`{name}`: checkpoint {dims:?}, model {}", t.shape())));
        }
        **t = Tensor5::from_vec(Shape5::from_dims(dims)?, r.data.iter().map(|&v| T::of(v as f64)).collect())?;
    }
    Ok(())
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load_into<T: Scalar>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    load_records(model, &read_file(path)?)
}
