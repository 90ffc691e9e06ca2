//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0-3   magic "YAEC"
//! u32         format version (currently 1)
//! u32         entry count
//! per entry:  u16 name length, name (UTF-8),
//!             u8 dtype (0 = f32, 1 = u64),
//!             u8 ndim, ndim x u32 dims,
//!             u64 byte offset into the payload section
//! payload     tightly packed entry data
//! ```
//!
//! Model tensors are stored as f32; counters and other integer metadata as
//! u64 under a `meta/` namespace; optimizer moments under `adam/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::scalar::Scalar;

use super::NnError;

const MAGIC: &[u8; 4] = b"YAEC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Dtype {
    F32,
    U64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U64 => 1,
        }
    }
    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::U64),
            _ => None,
        }
    }
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U64 => 8,
        }
    }
}

/// Accumulates entries, then serializes in one pass.
#[derive(Default)]
pub struct CheckpointWriter {
    entries: Vec<(String, Dtype, Vec<usize>, Vec<u8>)>,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_f32(&mut self, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) {
        let mut bytes = Vec::new();
        let mut n = 0usize;
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
            n += 1;
        }
        assert_eq!(n, shape.iter().product::<usize>(), "entry {name} length/shape mismatch");
        self.entries.push((name.to_string(), Dtype::F32, shape.to_vec(), bytes));
    }

    pub fn add_tensor<S: Scalar>(&mut self, name: &str, shape: &[usize], values: &[S]) {
        self.add_f32(name, shape, values.iter().map(|v| v.as_f64() as f32));
    }

    pub fn add_u64(&mut self, name: &str, values: &[u64]) {
        let mut bytes = Vec::new();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push((name.to_string(), Dtype::U64, vec![values.len()], bytes));
    }

    pub fn write_to(&self, path: &Path) -> Result<(), NnError> {
        let io_err = |e: std::io::Error| NnError::Checkpoint(format!("{}: {e}", path.display()));
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        let mut payload = Vec::new();
        for (name, dtype, shape, bytes) in &self.entries {
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(dtype.code());
            header.push(shape.len() as u8);
            for d in shape {
                header.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            payload.extend_from_slice(bytes);
            offset += bytes.len() as u64;
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&header).map_err(io_err)?;
        f.write_all(&payload).map_err(io_err)?;
        Ok(())
    }
}

/// A parsed checkpoint, entries keyed by name.
pub struct Checkpoint {
    f32_entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    u64_entries: BTreeMap<String, Vec<u64>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, NnError> {
        let buf = fs::read(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::parse(&buf)
    }

    pub fn parse(buf: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NnError::Checkpoint("entry name is not UTF-8".into()))?;
            let dtype = Dtype::from_code(r.u8()?)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown dtype for {name}")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let offset = r.u64()? as usize;
            manifest.push((name, dtype, shape, offset));
        }
        let payload = &buf[r.pos..];
        let mut f32_entries = BTreeMap::new();
        let mut u64_entries = BTreeMap::new();
        for (name, dtype, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let bytes = n * dtype.width();
            if offset + bytes > payload.len() {
                return Err(NnError::Checkpoint(format!(
                    "payload shorter than entry {name} requires"
                )));
            }
            let data = &payload[offset..offset + bytes];
            match dtype {
                Dtype::F32 => {
                    let vals = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    f32_entries.insert(name, (shape, vals));
                }
                Dtype::U64 => {
                    let vals = data
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    u64_entries.insert(name, vals);
                }
            }
        }
        Ok(Checkpoint { f32_entries, u64_entries })
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.f32_entries.get(name).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn tensor_as<S: Scalar>(&self, name: &str) -> Option<Vec<S>> {
        self.f32_entries.get(name).map(|(_, v)| v.iter().map(|&x| S::from_f64(x as f64)).collect())
    }

    pub fn u64s(&self, name: &str) -> Option<&[u64]> {
        self.u64_entries.get(name).map(|v| v.as_slice())
    }

    pub fn u64_scalar(&self, name: &str) -> Option<u64> {
        self.u64s(name).and_then(|v| v.first().copied())
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.f32_entries.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut w = CheckpointWriter::new();
        let vals: Vec<f32> = (0..12).map(|i| (i as f32).sin() * 1e-3).collect();
        w.add_f32("enc.w", &[3, 4], vals.iter().copied());
        w.add_u64("meta/iteration", &[12345678901234]);
        w.write_to(&path).unwrap();

        let c = Checkpoint::load(&path).unwrap();
        let (shape, got) = c.tensor("enc.w").unwrap();
        assert_eq!(shape, &[3, 4]);
        assert!(got.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c.u64_scalar("meta/iteration"), Some(12345678901234));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::parse(b"NOPE\x01\x00\x00\x00"), Err(NnError::Checkpoint(_))));
        let mut w = CheckpointWriter::new();
        w.add_f32("t", &[4], [1.0f32, 2.0, 3.0, 4.0].into_iter());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        w.write_to(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = &full[..full.len() - 5];
        assert!(matches!(Checkpoint::parse(cut), Err(NnError::Checkpoint(_))));
    }
}
