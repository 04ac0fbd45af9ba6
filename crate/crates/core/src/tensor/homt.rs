//! `HOMT` binary tensor records and the named-tensor checkpoint container.
//!
//! Record: `HOMT`, version `1`, dtype `0` (f64), ndim, reserved `0`, then
//! `ndim` little-endian `u64` dims, then little-endian `f64` data.
//! Container: a sequence of `(u16 LE name length, UTF-8 name, record)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HOMT";
pub const VERSION: u8 = 1;
pub const DTYPE_F64: u8 = 0;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64);
    out.push(t.shape().len() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptTensor(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn decode_at(cur: &mut Cursor<'_>) -> Result<Tensor> {
    if cur.take(4)? != MAGIC {
        return Err(Error::CorruptTensor("bad magic".into()));
    }
    let header = cur.take(4)?;
    if header[0] != VERSION {
        return Err(Error::CorruptTensor(format!(
            "unsupported version {}",
            header[0]
        )));
    }
    if header[1] != DTYPE_F64 {
        return Err(Error::CorruptTensor(format!(
            "unsupported dtype {}",
            header[1]
        )));
    }
    let ndim = header[2] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::CorruptTensor("dim overflow".into()))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::CorruptTensor("dims overflow".into()))?;
    let bytes = cur.take(
        len.checked_mul(8)
            .ok_or_else(|| Error::CorruptTensor("dims overflow".into()))?,
    )?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::CorruptTensor(e.to_string()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let t = decode_at(&mut cur)?;
    if !cur.done() {
        return Err(Error::CorruptTensor("trailing bytes".into()));
    }
    Ok(t)
}

/// Ordered collection of named tensors; serializes to the checkpoint container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`, keeping first-insertion order.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::CorruptTensor(format!("checkpoint is missing {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let mut archive = Archive::new();
        while !cur.done() {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::CorruptTensor("name is not UTF-8".into()))?
                .to_string();
            let t = decode_at(&mut cur)?;
            if archive.contains(&name) {
                return Err(Error::CorruptTensor(format!("duplicate entry {name:?}")));
            }
            archive.entries.push((name, t));
        }
        Ok(archive)
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}
