//! Parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic     [u8; 4]  "TBC1"
//! version   u32      1
//! meta_len  u32, meta [u8; meta_len]   (UTF-8, usually TOML)
//! n_entries u32
//! per entry:
//!   name_len u32, name [u8; name_len]
//!   kind u8 (0 = parameter, 1 = buffer)
//!   ndim u32, dims [u64; ndim]
//!   offset u64 (bytes from the start of the blob section), count u64
//! blob section: float32 values of every entry in table order
//! ```

use std::fs;
use std::path::Path;

use ndarray::ArrayViewD;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::Parameters;
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBC1";
const VERSION: u32 = 1;

struct Entry {
    name: String,
    kind: u8,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn entry<F: Real>(kind: u8, name: &str, a: ArrayViewD<'_, F>) -> Entry {
    Entry {
        name: name.to_string(),
        kind,
        shape: a.shape().to_vec(),
        values: a.iter().map(|v| v.as_f32()).collect(),
    }
}

fn entries<F: Real, M: Parameters<F>>(model: &M) -> Vec<Entry> {
    let mut out = Vec::new();
    model.visit("", &mut |n, a| out.push(entry(0, n, a)));
    model.visit_buffers("", &mut |n, a| out.push(entry(1, n, a)));
    out
}

pub fn encode_checkpoint<F: Real, M: Parameters<F>>(model: &M, meta: &str) -> Vec<u8> {
    let entries = entries(model);
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    b.extend_from_slice(meta.as_bytes());
    b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in &entries {
        b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        b.extend_from_slice(e.name.as_bytes());
        b.push(e.kind);
        b.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        b.extend_from_slice(&offset.to_le_bytes());
        b.extend_from_slice(&(e.values.len() as u64).to_le_bytes());
        offset += 4 * e.values.len() as u64;
    }
    for e in &entries {
        for v in &e.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Parsed table entry: name, kind, shape, value offset and count.
type TableEntry = (String, u8, Vec<usize>, usize, usize);

fn parse(buf: &[u8]) -> Result<(String, Vec<TableEntry>, &[u8])> {
    let mut c = Cursor { buf, pos: 0 };
    if c.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = String::from_utf8(c.bytes(meta_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
    let n = c.u32()? as usize;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.bytes(len)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let kind = c.bytes(1)?[0];
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        let count = c.u64()? as usize;
        table.push((name, kind, shape, offset, count));
    }
    let blobs = &buf[c.pos..];
    let needed = table.iter().map(|t| t.3 + 4 * t.4).max().unwrap_or(0);
    if needed != blobs.len() {
        return Err(Error::Data(format!(
            "checkpoint blob section is {} bytes, table expects {needed}",
            blobs.len()
        )));
    }
    Ok((meta, table, blobs))
}

/// Loads values into `model`, whose parameter names and shapes must match the
/// file exactly. Returns the metadata string.
pub fn decode_checkpoint_into<F: Real, M: Parameters<F>>(buf: &[u8], model: &mut M) -> Result<String> {
    let (meta, table, blobs) = parse(buf)?;
    let mut idx = 0;
    let mut err = None;
    let mut load = |kind: u8, name: &str, mut a: ndarray::ArrayViewMutD<'_, F>| {
        if err.is_some() {
            return;
        }
        let Some((tname, tkind, shape, offset, count)) = table.get(idx) else {
            err = Some(Error::Data(format!("checkpoint lacks entry {name}")));
            return;
        };
        idx += 1;
        if tname != name || *tkind != kind || shape.as_slice() != a.shape() || *count != a.len() {
            err = Some(Error::Data(format!(
                "checkpoint entry {tname} {shape:?} does not match model entry {name} {:?}",
                a.shape()
            )));
            return;
        }
        for (i, v) in a.iter_mut().enumerate() {
            let at = offset + 4 * i;
            *v = F::lit(f32::from_le_bytes(blobs[at..at + 4].try_into().expect("4 bytes")) as f64);
        }
    };
    model.visit_mut("", &mut |n, a| load(0, n, a));
    model.visit_buffers_mut("", &mut |n, a| load(1, n, a));
    if let Some(e) = err {
        return Err(e);
    }
    if idx != table.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} entries, model has {idx}",
            table.len()
        )));
    }
    Ok(meta)
}

/// Metadata string of a checkpoint file without loading parameters.
pub fn read_checkpoint_meta(path: &Path) -> Result<String> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&buf)?.0)
}

pub fn save_checkpoint<F: Real, M: Parameters<F>>(path: &Path, model: &M, meta: &str) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta))
}

pub fn load_checkpoint<F: Real, M: Parameters<F>>(path: &Path, model: &mut M) -> Result<String> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint_into(&buf, model)
}
