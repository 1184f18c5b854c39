//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `PCNETCKP`, version byte, SHA-256 digest of the
//! embedded config text, config text (`u32` length + UTF-8), step (`u64`), entry
//! count (`u32`), then per entry: name (`u32` length + UTF-8), kind byte, rank
//! byte, `u32` dims, and value, first moment, second moment as `f64`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PCNETCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub params: ParamStore,
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&config_digest(&self.config_text));
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, e) in self.params.iter() {
            put_str(&mut out, name);
            out.push(match e.kind {
                EntryKind::Trainable => 0,
                EntryKind::Buffer => 1,
            });
            out.push(e.value.rank() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for t in [&e.value, &e.moment1, &e.moment2] {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let config_text = r.string()?;
        if config_digest(&config_text) != digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let kind = match r.take(1)?[0] {
                0 => EntryKind::Trainable,
                1 => EntryKind::Buffer,
                k => return Err(Error::Checkpoint(format!("entry `{name}` has unknown kind {k}"))),
            };
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut tensors = Vec::with_capacity(3);
            for _ in 0..3 {
                let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                tensors.push(
                    Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?,
                );
            }
            let m2 = tensors.pop().expect("three tensors");
            let m1 = tensors.pop().expect("three tensors");
            params.insert(&name, tensors.pop().expect("three tensors"), kind)?;
            let e = params.get_mut(&name)?;
            e.moment1 = m1;
            e.moment2 = m2;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::new(&[2, 2], vec![1.0, -2.5, 1e-300, 3.0]).unwrap(), EntryKind::Trainable).unwrap();
        params.insert("a.bn.running_var", Tensor::filled(&[2], 0.5), EntryKind::Buffer).unwrap();
        params.get_mut("a.weight").unwrap().moment1 = Tensor::filled(&[2, 2], 0.25);
        Checkpoint { config_text: "task=classification\n".into(), step: 42, params }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert!(back.params.get("a.weight").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[9 + 32 + 4] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("digest")));
    }
}
