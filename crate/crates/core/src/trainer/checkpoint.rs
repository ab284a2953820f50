//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! b"STMXCKPT"            magic
//! u32                    format version
//! u32 + bytes            JSON config echo
//! u32                    parameter count
//! per parameter:
//!   u32 + bytes          UTF-8 name
//!   u32, u32 * ndim      shape
//!   f32 * numel          values
//! ```

use std::fs;
use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STMXCKPT";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(config_json: &str, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, config_json.len())?;
    out.extend_from_slice(config_json.as_bytes());
    put_u32(&mut out, store.len())?;
    for (_, slot) in store.iter() {
        put_u32(&mut out, slot.name.len())?;
        out.extend_from_slice(slot.name.as_bytes());
        put_u32(&mut out, slot.value.shape().len())?;
        for &d in slot.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in slot.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

/// Parsed checkpoint: config echo and named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let config_json = r.string()?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel else {
            return Err(Error::Data(format!("parameter {name}: shape {shape:?} overflows")));
        };
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Data("shape overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_json, params })
}

/// Copies checkpoint tensors into `store`, matching by name and shape. Every
/// slot of the store must be covered.
pub fn restore(ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<()> {
    if ckpt.params.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (name, t) in &ckpt.params {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Data(format!("checkpoint parameter {name} not in model")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Data(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

pub fn save(path: &Path, config_json: &str, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, encode(config_json, store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
