//! Flat binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "MOLEMCKP"
//! version  u32       currently 1
//! hlen     u64       header length in bytes
//! header   hlen      UTF-8, one line per tensor: name \t d0,d1,... \t byte_offset \n
//! payload  ...       f64 little-endian, offsets relative to payload start
//! ```

use std::path::Path;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOLEMCKP";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, ids: &[ParamId]) -> Self {
        let entries = ids
            .iter()
            .map(|&id| (store.name(id).to_string(), store.get(id).clone()))
            .collect();
        Self { entries }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{}\t{}\t{}\n", name, dims.join(","), offset));
            offset += t.len() * 8;
        }
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, t) in &self.entries {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| bad("header length overflow"))?;
        let hend = 20usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
        if hend > bytes.len() {
            return Err(bad("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[20..hend]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[hend..];
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let mut covered = 0usize;
        for line in header.lines() {
            let mut parts = line.split('\t');
            let (Some(name), Some(dims), Some(off), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("malformed header line"));
            };
            if name.is_empty() || entries.iter().any(|(n, _)| n == name) {
                return Err(bad("empty or duplicate tensor name"));
            }
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad("bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflow"))?;
            let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
            if off != covered {
                return Err(bad("tensor offsets must be contiguous"));
            }
            let len = count.checked_mul(8).ok_or_else(|| bad("shape overflow"))?;
            let end = off.checked_add(len).ok_or_else(|| bad("offset overflow"))?;
            if end > payload.len() {
                return Err(bad("tensor data out of bounds"));
            }
            let data = payload[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name.to_string(), Tensor::new(shape, data)?));
            covered = end;
        }
        if covered != payload.len() {
            return Err(bad("trailing payload bytes"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Adds every entry to the store as a new parameter.
    pub fn insert_into(&self, store: &mut ParamStore) -> Result<Vec<ParamId>> {
        self.entries
            .iter()
            .map(|(name, t)| store.insert(name.clone(), t.clone()))
            .collect()
    }

    /// Copies every entry into the store under the same name; each name must
    /// already exist with a matching shape.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.entries {
            let id = store
                .id(name)
                .ok_or_else(|| Error::contract(format!("checkpoint tensor {name} has no parameter")))?;
            store.assign(id, t.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let ck = Checkpoint {
            entries: vec![
                ("a/w".into(), Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![1e300, -2.0, 7.0]).unwrap()),
            ],
        };
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.entries.len(), 2);
        for ((n1, t1), (n2, t2)) in ck.entries.iter().zip(&back.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.bits().eq(t2.bits()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint {
            entries: vec![("x".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())],
        };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(Checkpoint::decode(&v2).is_err());
    }
}
