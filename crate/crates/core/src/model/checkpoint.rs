//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MERLIN1"
//! u32 meta_count,  then per entry: u16 name_len, name (UTF-8), u64 value
//! u32 tensor_count, then per entry: u16 name_len, name, u8 dtype (1 = f64),
//!                                   u8 ndim, ndim × u64 dims
//! f64 payloads of every tensor, in table order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MerlinError, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"MERLIN1";
const DTYPE_F64: u8 = 1;

/// Named integer metadata plus an ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, u64>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: u64) {
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .copied()
            .ok_or_else(|| MerlinError::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        Ok(self.meta(key)? as usize)
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    /// Adds or replaces a tensor; replacement keeps the original position.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        match self.tensors.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name.to_string(), tensor)),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| MerlinError::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_name(&mut out, k)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name)?;
            out.push(DTYPE_F64);
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| MerlinError::Checkpoint(format!("{name}: too many dimensions")))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(MerlinError::Checkpoint("bad magic, not a MERLIN1 file".into()));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.name()?;
            meta.insert(k, r.u64()?);
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(MerlinError::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| MerlinError::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                MerlinError::Checkpoint(format!("{name}: shape overflow"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| MerlinError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(MerlinError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| MerlinError::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MerlinError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| MerlinError::Checkpoint("name is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.set_meta("d", 8);
        c.insert("w", Tensor::from_vec(vec![1.5, -2.0]));
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..7], b"MERLIN1");
        assert_eq!(u32::from_le_bytes(b[7..11].try_into().unwrap()), 1);
        // payload is the final 16 bytes
        assert_eq!(f64::from_le_bytes(b[b.len() - 16..b.len() - 8].try_into().unwrap()), 1.5);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let b = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in prop::collection::vec(any::<f64>(), 1..40),
            meta in any::<u64>(),
        ) {
            let mut c = Checkpoint::new();
            c.set_meta("m", meta);
            c.insert("a", Tensor::from_vec(vals.clone()));
            c.insert("b", Tensor::new(vec![1, vals.len()], vals).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.meta("m").unwrap(), meta);
            for name in ["a", "b"] {
                let (x, y) = (c.tensor(name).unwrap(), back.tensor(name).unwrap());
                prop_assert_eq!(x.shape(), y.shape());
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert_eq!(p.to_bits(), q.to_bits());
                }
            }
        }
    }
}
