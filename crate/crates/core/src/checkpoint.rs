//! AGFK named-tensor container.
//!
//! Layout (little-endian): magic `AGFK`, version `u32`, tensor count `u32`;
//! then per tensor: name length `u16`, UTF-8 name, dtype `u8` (0 = f64),
//! rank `u8`, dims as `u32`, raw payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AGFK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected AGFK".into() });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: at, message: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format { offset: at, message: format!("unknown dtype code {dtype} for {name}") });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let at = r.pos;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("payload of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format { offset: at, message: format!("{name}: {e}") })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos, message: "trailing bytes after last tensor".into() });
    }
    Ok(out)
}

pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = encode(&store_tensors(store))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads every tensor of the file into `store`; names and shapes must match
/// the store exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    apply(&tensors, store)
}

pub fn apply(tensors: &[(String, Tensor)], store: &mut ParamStore) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::dim(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(name)
            .ok_or_else(|| Error::dim(format!("checkpoint tensor `{name}` does not exist in the model")))?;
        store.set(id, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bits() {
        let t = vec![
            ("a".to_string(), Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap()),
            ("b.c".to_string(), Tensor::new(&[1, 3], vec![1.0 / 3.0, f64::MAX, 1e-300]).unwrap()),
        ];
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in t.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let t = vec![("w".to_string(), Tensor::full(&[4], 1.0))];
        let bytes = encode(&t).unwrap();
        match decode(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4 + 4 + 4 + 2 + 1 + 1 + 1 + 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode(b"NOPE"), Err(Error::Format { offset: 0, .. })));
    }
}
