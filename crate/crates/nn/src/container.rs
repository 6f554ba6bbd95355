//! Versioned binary container for named float32 arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      [u8; 4]
//! version    u32
//! kind       u32 length + UTF-8
//! config     u32 length + UTF-8 (JSON echo of the producing config)
//! meta       u32 length + UTF-8 (JSON provenance)
//! count      u32
//! count × {  name u32 length + UTF-8, dtype u8 (0 = f32), rank u8,
//!            dims u32 × rank, payload f32 LE row-major }
//! checksum   [u8; 32]  SHA-256 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub kind: String,
    pub config: String,
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(magic: [u8; 4], kind: impl Into<String>) -> Self {
        Self { magic, kind: kind.into(), config: "{}".into(), meta: "{}".into(), tensors: Vec::new() }
    }

    pub fn with_params(mut self, params: &ParamSet<f32>) -> Self {
        self.tensors = params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        self
    }

    pub fn params(&self) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        for (name, t) in &self.tensors {
            ps.insert(name.clone(), t.clone());
        }
        ps
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ContainerWriter::default();
        w.buf.extend_from_slice(&self.magic);
        w.u32(FORMAT_VERSION);
        w.str(&self.kind);
        w.str(&self.config);
        w.str(&self.meta);
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.str(name);
            w.buf.push(DTYPE_F32);
            w.buf.push(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for v in t.data() {
                w.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&w.buf);
        w.buf.extend_from_slice(&digest);
        w.buf
    }

    /// Parses and verifies a container. The magic must equal `magic`.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(NnError::Container("file too short".into()));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(NnError::Checksum("container".into()));
        }
        let mut r = ContainerReader { buf: body, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(NnError::Container(format!("bad magic {found:?}, expected {magic:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Container(format!("unsupported format version {version}")));
        }
        let kind = r.str()?;
        let config = r.str()?;
        let meta = r.str()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(NnError::Container(format!("unknown dtype tag {dtype} for `{name}`")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != body.len() {
            return Err(NnError::Container(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { magic, kind, config, meta, tensors })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(hex_digest(&bytes[bytes.len() - 32..]))
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, magic).map_err(|e| match e {
            NnError::Checksum(_) => NnError::Checksum(path.display().to_string()),
            other => other,
        })
    }

    /// Hex SHA-256 of the serialised body (identical to the stored trailer).
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes();
        hex_digest(&bytes[bytes.len() - 32..])
    }
}

/// Reads the checksum trailer of a container file without parsing it.
pub fn stored_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    if bytes.len() < 32 {
        return Err(NnError::Container("file too short".into()));
    }
    Ok(hex_digest(&bytes[bytes.len() - 32..]))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

pub struct ContainerReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ContainerReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(NnError::Container(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| NnError::Container(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: [u8; 4] = *b"TEST";

    fn sample() -> Container {
        let mut c = Container::new(MAGIC, "unit");
        c.config = r#"{"a":1}"#.into();
        c.tensors.push(("w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, -0.0, f32::MIN_POSITIVE, 7.0]).unwrap()));
        c.tensors.push(("s".into(), Tensor::scalar(3.0)));
        c
    }

    #[test]
    fn flipping_any_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in [0, 5, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert!(Container::from_bytes(&b, MAGIC).is_err(), "byte {i}");
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Container::from_bytes(&bytes, *b"NOPE"), Err(NnError::Container(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(data in proptest::collection::vec(any::<f32>(), 0..64), meta in "[a-z{}:\"]{0,20}") {
            let mut c = Container::new(MAGIC, "p");
            c.meta = meta;
            let n = data.len();
            c.tensors.push(("x".into(), Tensor::new(vec![n], data).unwrap()));
            let back = Container::from_bytes(&c.to_bytes(), MAGIC).unwrap();
            prop_assert_eq!(&back.meta, &c.meta);
            prop_assert!(back.tensors[0].1.bit_eq(&c.tensors[0].1));
        }
    }
}
