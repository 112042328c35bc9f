//! `GSLF` tensor checkpoints.
//!
//! ```text
//! "GSLF"  u32 version  u64 count
//! per entry, sorted by name:
//!   u16 name_len  name (UTF-8)  u8 rank  u64 dims[rank]  f32 values[prod(dims)]
//! ```
//! All integers and floats are little-endian. Values are rounded to single
//! precision on save.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GSLF";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::validation(format!("duplicate tensor name {:?}", w[0].0)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_le_bytes());
    for (name, t) in sorted {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::validation(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::validation(format!("tensor {name:?} has too many dimensions")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!("truncated while reading {what}"))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn error(&self, reason: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason,
        }
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        c.pos = 0;
        return Err(c.error("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != VERSION {
        c.pos -= 4;
        return Err(c.error(format!("unsupported format version {version}")));
    }
    let count = u64::from_le_bytes(c.array("entry count")?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(c.array("name length")?) as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::Format {
            offset: start as u64,
            reason: "tensor name is not UTF-8".into(),
        })?;
        let rank = c.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(c.array("dimension")?);
            shape.push(usize::try_from(d).map_err(|_| c.error(format!("dimension {d} too large")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| c.error("tensor size overflows".into()))?;
        let bytes = c.take(n, "tensor values")?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("chunk of 4"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.error(e.to_string()))?;
        out.push((name.to_string(), t));
    }
    if c.pos != buf.len() {
        return Err(c.error(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(out)
}

/// Writes to a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("b".into(), Tensor::from_rows(&[vec![1.5, -2.25], vec![0.0, 3.0]])),
            ("a".into(), Tensor::new(vec![3], vec![0.1f32 as f64, 7.0, -0.0]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_sorted() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"GSLF");
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1], sample()[0]);
        assert_eq!(back[0].1.data()[2].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn empty_set() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(encode(&[("x".into(), t.clone()), ("x".into(), t)]).is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gslf");
        save_checkpoint(&p, &sample()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().len(), 2);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
