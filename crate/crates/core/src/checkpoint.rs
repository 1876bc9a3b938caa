//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "XCNN"  u32 version (1)
//! u32 len, arch id bytes (utf-8)
//! u64 seed, u64 epoch
//! u32 tensor count
//! per tensor: u32 len, name bytes, u32 rank, rank x u64 dims, f64 payload
//! u64 checksum: wrapping sum of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ArchId, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XCNN";
pub const VERSION: u32 = 1;

/// Every stored tensor in file order: trainable parameters followed, per
/// batch-norm layer, by its running mean and variance.
fn stored_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let names = model.layer_names();
    let mut out = Vec::new();
    for (layer, name) in model.layers.iter().zip(&names) {
        for p in &layer.state.params {
            out.push((format!("{name}.{}", p.name), p.value.clone()));
        }
        if let Some(rs) = &layer.state.running {
            let c = rs.mean.len();
            out.push((
                format!("{name}.running_mean"),
                Tensor::from_vec(&[c], rs.mean.clone()).expect("non-empty stats"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::from_vec(&[c], rs.var.clone()).expect("non-empty stats"),
            ));
        }
    }
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, model.id().as_str());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.epoch.to_le_bytes());
    let tensors = stored_tensors(model);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("string is not utf-8"))
    }
}

/// Parses a checkpoint. With `expected`, the stored architecture must match.
pub fn decode(bytes: &[u8], path: &Path, expected: Option<ArchId>) -> Result<Model> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(r.corrupt("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(r.corrupt("checksum mismatch"));
    }
    r.bytes = body;

    let arch = r.string()?;
    let id: ArchId = arch
        .parse()
        .map_err(|_| r.corrupt(format!("unknown architecture `{arch}`")))?;
    if let Some(want) = expected {
        if want != id {
            return Err(Error::Compatibility {
                found: id.to_string(),
                requested: want.to_string(),
            });
        }
    }
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let mut model = Model::build(id, seed)?;
    model.epoch = epoch;

    let count = r.u32()? as usize;
    let expected_tensors = stored_tensors(&model);
    if count != expected_tensors.len() {
        return Err(r.corrupt(format!(
            "{count} tensors stored, {id} has {}",
            expected_tensors.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want) in &expected_tensors {
        let name = r.string()?;
        if &name != want_name {
            return Err(r.corrupt(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != want.shape() {
            return Err(r.corrupt(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                want.shape()
            )));
        }
        let raw = r.take(want.len() * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push(data);
    }
    if r.pos != body.len() {
        return Err(r.corrupt("trailing bytes after tensors"));
    }

    let mut it = loaded.into_iter();
    for layer in &mut model.layers {
        for p in &mut layer.state.params {
            p.value
                .data_mut()
                .copy_from_slice(&it.next().expect("counted"));
        }
        if let Some(rs) = &mut layer.state.running {
            rs.mean = it.next().expect("counted");
            rs.var = it.next().expect("counted");
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<ArchId>) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, expected)
}
