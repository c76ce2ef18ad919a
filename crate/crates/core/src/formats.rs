//! Binary grid and checkpoint files.
//!
//! Grid file (`VVGR`):
//!
//! ```text
//! magic "VVGR" | version u16 | rank u16 | dims u32 x rank | payload f32 x prod(dims)
//! ```
//!
//! Checkpoint file (`VVCK`):
//!
//! ```text
//! magic "VVCK" | version u16 | count u32 |
//!   count x ( name_len u16 | name utf-8 | rank u16 | dims u32 x rank | payload f32 )
//! ```
//!
//! All integers and floats are little-endian; payloads are row-major with the
//! last axis fastest.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"VVGR";
pub const GRID_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<Vec<u32>> {
        let rank = self.u16()? as usize;
        (0..rank).map(|_| self.u32()).collect()
    }

    fn payload(&mut self, dims: &[u32]) -> Result<Vec<f32>> {
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("dims overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[u32]) {
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
}

fn put_payload(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn check_len(dims: &[u32], len: usize) -> Result<()> {
    let want: usize = dims.iter().map(|&d| d as usize).product();
    if want != len {
        return Err(Error::Shape(format!("dims {dims:?} need {want} values, got {len}")));
    }
    Ok(())
}

fn to_dims(shape: &[usize]) -> Result<Vec<u32>> {
    shape
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32"))))
        .collect()
}

/// A dense single-precision array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFile {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl GridFile {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        check_len(&dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(to_dims(shape)?, values.iter().map(|&v| v as f32).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        put_dims(&mut out, &self.dims);
        put_payload(&mut out, &self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != GRID_MAGIC {
            return Err(Error::Format("bad grid magic".into()));
        }
        let version = r.u16()?;
        if version != GRID_VERSION {
            return Err(Error::Version {
                found: version,
                expected: GRID_VERSION,
            });
        }
        let dims = r.dims()?;
        let data = r.payload(&dims)?;
        r.finish()?;
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_array(name: impl Into<String>, a: &ArrayD<f64>) -> Result<Self> {
        Ok(NamedTensor {
            name: name.into(),
            dims: to_dims(a.shape())?,
            data: a.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), self.data.iter().map(|&v| v as f64).collect())
            .expect("validated on construction")
    }
}

/// Ordered table of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointFile {
    tensors: Vec<NamedTensor>,
}

impl CheckpointFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: NamedTensor) -> Result<()> {
        check_len(&t.dims, t.data.len())?;
        if t.name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name too long".into()));
        }
        if self.get(&t.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn push_array(&mut self, name: &str, a: &ArrayD<f64>) -> Result<()> {
        self.push(NamedTensor::from_array(name, a)?)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up `name` and checks its shape.
    pub fn array(&self, name: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))?;
        let a = t.to_array();
        if a.shape() != shape {
            return Err(Error::Shape(format!(
                "{name}: checkpoint has {:?}, model expects {shape:?}",
                a.shape()
            )));
        }
        Ok(a)
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            put_dims(&mut out, &t.dims);
            put_payload(&mut out, &t.data);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut names = HashSet::new();
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_owned();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            let dims = r.dims()?;
            let data = r.payload(&dims)?;
            tensors.push(NamedTensor { name, dims, data });
        }
        r.finish()?;
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
