//! Binary index file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BRIX" | version u32 | d u32 | count u64
//! count × d × f32                      vectors, insertion order
//! count × (u32 len | id bytes | u8 label mask | 32-byte narrative digest)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{RetrievalError, VectorIndex};
use crate::casemodel::LabelSet;

pub const INDEX_MAGIC: &[u8; 4] = b"BRIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

pub fn write_index<W: Write>(mut w: W, index: &VectorIndex) -> std::io::Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(index.d as u32).to_le_bytes())?;
    w.write_all(&(index.entries.len() as u64).to_le_bytes())?;
    for e in &index.entries {
        for v in &e.vector {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for e in &index.entries {
        w.write_all(&(e.id.len() as u32).to_le_bytes())?;
        w.write_all(e.id.as_bytes())?;
        w.write_all(&[e.labels.bits()])?;
        w.write_all(&e.digest)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RetrievalError::CorruptIndex("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_index<R: Read>(mut r: R) -> Result<VectorIndex, RetrievalError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != INDEX_MAGIC {
        return Err(RetrievalError::CorruptIndex("bad magic".into()));
    }
    let version = c.u32()?;
    if version != INDEX_FORMAT_VERSION {
        return Err(RetrievalError::CorruptIndex(format!(
            "format version {version}, expected {INDEX_FORMAT_VERSION}"
        )));
    }
    let d = c.u32()? as usize;
    let count = usize::try_from(c.u64()?).map_err(|_| RetrievalError::CorruptIndex("count".into()))?;
    let floats = count.checked_mul(d).and_then(|n| n.checked_mul(4));
    let raw = c.take(floats.ok_or_else(|| RetrievalError::CorruptIndex("size overflow".into()))?)?;
    let mut vectors = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let mut index = VectorIndex::new(d);
    for _ in 0..count {
        let vector: Vec<f32> = vectors.by_ref().take(d).collect();
        let len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(len)?)
            .map_err(|_| RetrievalError::CorruptIndex("id is not UTF-8".into()))?
            .to_string();
        let labels = LabelSet::from_bits(c.take(1)?[0])
            .ok_or_else(|| RetrievalError::CorruptIndex("bad label mask".into()))?;
        let digest: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        if index.by_id.contains_key(&id) {
            return Err(RetrievalError::CorruptIndex(format!("duplicate id {id:?}")));
        }
        index.by_id.insert(id.clone(), index.entries.len());
        index.entries.push(super::IndexEntry { id, vector, labels, digest });
    }
    if c.pos != buf.len() {
        return Err(RetrievalError::CorruptIndex("trailing bytes".into()));
    }
    Ok(index)
}

pub fn index_save(index: &VectorIndex, path: &Path) -> Result<(), RetrievalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_index(&mut w, index)?;
    w.flush()?;
    Ok(())
}

pub fn index_load(path: &Path) -> Result<VectorIndex, RetrievalError> {
    read_index(std::fs::File::open(path)?)
}
