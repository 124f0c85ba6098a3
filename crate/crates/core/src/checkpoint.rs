//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "TFCK" | version u32 | entry count u32
//! per entry: name length u16 | name bytes | dtype u8 (0 = f32, 1 = f64)
//!            | rank u8 | extents u32 × rank | raw values
//! ```
//!
//! Parameters are written first, then buffers, each in registration order.
//! Values are always written as f64; f32 entries are accepted on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = store
        .params()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(store.buffers().map(|b| (b.name.as_str(), &b.value)))
        .collect();
    let count = u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many entries".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(4);
        for e in t.shape().0 {
            let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("{name}: extent {e} exceeds u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
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
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into named tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} > 4")));
        }
        let mut dims = [1usize; 4];
        for i in 0..rank {
            dims[4 - rank + i] = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let n = shape.checked_numel()?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r.take(n.checked_mul(8).ok_or(Error::Overflow)?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => r.take(n.checked_mul(4).ok_or(Error::Overflow)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            d => return Err(Error::Checkpoint(format!("{name}: unknown dtype {d}"))),
        };
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Overwrites every parameter and buffer in `store` from `bytes`. The file
/// must name each store entry exactly once and nothing else.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    let expected = store.len() + store.buffers().count();
    if entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model expects {expected}",
            entries.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        store.assign(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    load_into(store, &fs::read(path)?)
}
