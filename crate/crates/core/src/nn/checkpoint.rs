//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): the 7-byte magic `SMCKPT1`, then one record per
//! named tensor until end of file: `u32` name length, name bytes (UTF-8),
//! `u32` rank, `rank × u64` extents, `f64` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SMCKPT1";

pub fn save_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
) -> Result<()> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    for (name, t) in tensors {
        buf.extend((name.len() as u32).to_le_bytes());
        buf.extend(name.as_bytes());
        buf.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend(v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::BadMagic { path: path.into() });
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: CHECKPOINT_MAGIC.len(),
        path,
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data(format!("non-UTF-8 tensor name in {}", path.display())))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.into(),
                detail: format!("wanted {n} bytes at offset {}", self.pos),
            });
        };
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
}
