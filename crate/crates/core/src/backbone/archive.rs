//! Binary weight archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TNXT"  u32 version  u32 count
//! count × { u16 name_len  name (UTF-8)  u8 dtype  u8 rank  rank × u64 extent  payload }
//! ```
//!
//! Tensors are stored in byte-wise name order, so equal contents give equal
//! files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TNXT";
pub const VERSION: u32 = 1;

/// A tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_typed<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Exact when `T` is the stored dtype.
    pub fn to_typed<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

fn read_payload<T: Scalar>(dims: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::DTYPE.size_bytes()).map(T::read_le).collect();
    Tensor::new(dims, data)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    tensors: BTreeMap<String, AnyTensor>,
}

fn tensor_err(name: &str, reason: impl Into<String>) -> Error {
    Error::ArchiveTensor { name: name.to_string(), reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Archive(format!("truncated at byte {} while reading {what}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: AnyTensor) -> Option<AnyTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<AnyTensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Archive("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| tensor_err(name, "name longer than 65535 bytes"))?;
            let rank = u8::try_from(t.dims().len()).map_err(|_| tensor_err(name, "rank above 255"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(rank);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            t.write_payload(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Archive("bad magic, not a weight archive".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for i in 0..count {
            let what = format!("name of tensor #{i}");
            let len = r.u16(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::Archive(format!("tensor #{i} has a non-UTF-8 name")))?
                .to_string();
            let ctx = |e: Error| match e {
                Error::Archive(m) => tensor_err(&name, m),
                other => other,
            };
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(tensor_err(&name, "out of order or duplicated"));
            }
            let code = r.u8("dtype").map_err(ctx)?;
            let dtype = DType::from_code(code).ok_or_else(|| tensor_err(&name, format!("unknown dtype code {code}")))?;
            let rank = r.u8("rank").map_err(ctx)? as usize;
            if rank == 0 {
                return Err(tensor_err(&name, "rank 0"));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut elems: usize = 1;
            for _ in 0..rank {
                let d = r.u64("extent").map_err(ctx)?;
                let d = usize::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| tensor_err(&name, format!("bad extent {d}")))?;
                elems = elems.checked_mul(d).ok_or_else(|| tensor_err(&name, "extent overflow"))?;
                dims.push(d);
            }
            let nbytes = elems.checked_mul(dtype.size_bytes()).ok_or_else(|| tensor_err(&name, "extent overflow"))?;
            let payload = r.take(nbytes, "payload").map_err(ctx)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_payload(dims, payload)?),
                DType::F64 => AnyTensor::F64(read_payload(dims, payload)?),
            };
            last = Some(name.clone());
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Archive { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.insert("b.weight", AnyTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5).unwrap()));
        a.insert("a.bias", AnyTensor::F64(Tensor::from_fn(&[4], |i| 1.0 / (i as f64 + 1.0)).unwrap()));
        a
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.names().collect::<Vec<_>>(), ["a.bias", "b.weight"]);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Archive(_))));
        let cut = &bytes[..bytes.len() - 3];
        match Archive::from_bytes(cut) {
            Err(Error::ArchiveTensor { name, .. }) => assert_eq!(name, "b.weight"),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Archive::from_bytes(&long).is_err());
        // first tensor's dtype byte sits after magic, version, count, name length and name
        let mut dt = bytes.clone();
        dt[4 + 4 + 4 + 2 + "a.bias".len()] = 9;
        match Archive::from_bytes(&dt) {
            Err(Error::ArchiveTensor { name, reason }) => {
                assert_eq!(name, "a.bias");
                assert!(reason.contains("dtype"));
            }
            other => panic!("{other:?}"),
        }
    }
}
