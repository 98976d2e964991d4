//! Binary feature cache: `MAVF`, a version byte, a record count, then per record the name,
//! shape and little-endian `f32` values.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"MAVF";
pub const CACHE_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(records: &[CacheRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let numel: usize = r.shape.iter().product();
        if numel != r.data.len() {
            return Err(Error::Cache(format!("record `{}` shape {:?} vs {} values", r.name, r.shape, r.data.len())));
        }
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Cache(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<CacheRecord>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Cache("record name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let bytes = c.take(numel.checked_mul(4).ok_or_else(|| Error::Cache("shape overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(CacheRecord { name, shape, data });
    }
    if c.pos != buf.len() {
        return Err(Error::Cache(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(records)
}

pub fn write_cache(path: &Path, records: &[CacheRecord]) -> Result<()> {
    let bytes = encode(records)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(names in proptest::collection::vec("[a-z0-9_]{0,12}", 0..4), dims in proptest::collection::vec(1usize..5, 1..4)) {
            let records: Vec<CacheRecord> = names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let numel: usize = dims.iter().product();
                    CacheRecord { name: n.clone(), shape: dims.clone(), data: (0..numel).map(|j| (i * 31 + j) as f32 * 0.5 - 3.0).collect() }
                })
                .collect();
            let bytes = encode(&records).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), records);
        }
    }

    #[test]
    fn header_layout() {
        let rec = CacheRecord {
            name: "x".into(),
            shape: vec![1, 2],
            data: vec![1.0, -2.0],
        };
        let bytes = encode(&[rec]).unwrap();
        assert_eq!(&bytes[..5], b"MAVF\x01");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 1 + 4 + (4 + 1) + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncation_and_bad_magic() {
        let rec = CacheRecord {
            name: "abc".into(),
            shape: vec![3],
            data: vec![1.0, 2.0, 3.0],
        };
        let bytes = encode(&[rec]).unwrap();
        for cut in [0, 3, 7, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
