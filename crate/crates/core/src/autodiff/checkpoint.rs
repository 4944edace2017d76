//! Named-tensor archive.
//!
//! Layout (little-endian): magic `MMAECKPT`, `u32` version, `u32` metadata
//! length and UTF-8 metadata, `u32` tensor count, then per tensor a `u32`
//! name length, the name, `u32` rank, `u32` dimensions and `f32` values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AutodiffError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Free-form metadata, JSON by convention.
    pub metadata: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<(), AutodiffError> {
    let v = u32::try_from(v).map_err(|_| AutodiffError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), AutodiffError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    put_u32(&mut out, ckpt.metadata.len())?;
    out.write_all(ckpt.metadata.as_bytes())?;
    put_u32(&mut out, ckpt.tensors.len())?;
    for (name, t) in &ckpt.tensors {
        put_u32(&mut out, name.len())?;
        out.write_all(name.as_bytes())?;
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor {
    bytes: Vec<u8>,
    pos: usize,
}

impl Cursor {
    fn take(&mut self, n: usize) -> Result<&[u8], AutodiffError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, AutodiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String, AutodiffError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, AutodiffError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let metadata = c.string()?;
    let count = c.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| AutodiffError::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != c.bytes.len() {
        return Err(AutodiffError::Checkpoint(format!("{} trailing bytes", c.bytes.len() - c.pos)));
    }
    Ok(Checkpoint { metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut ckpt = Checkpoint { metadata: "{\"k\":1}".into(), ..Default::default() };
        ckpt.tensors.insert("a.w".into(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        ckpt.tensors.insert("s".into(), Tensor::scalar(7.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"MMAECKPT");
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, bad).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
