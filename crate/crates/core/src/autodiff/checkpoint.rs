//! Portable parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "NSEPCKPT"
//! version  u32      1
//! hlen     u32      length of the header in bytes
//! header   hlen     UTF-8 `key=value` lines
//! count    u32      number of records
//! record*  name_len u32, name bytes (UTF-8), ndim u32, dims u64 × ndim,
//!          data f64 × product(dims)
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSEPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header_text = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line without '=': {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_stable() {
        let ck = Checkpoint {
            header: vec![("n".into(), "2".into())],
            records: vec![("w".into(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap())],
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], b"NSEPCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 4);
        assert_eq!(&b[16..20], b"n=2\n");
        // count, name_len, "w", ndim, dim, 2 values
        assert_eq!(b.len(), 20 + 4 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck);
    }

    #[test]
    fn truncated_input_is_a_format_error() {
        let ck = Checkpoint {
            header: vec![],
            records: vec![("w".into(), Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())],
        };
        let b = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"garbage!"), Err(Error::Format(_))));
    }
}
