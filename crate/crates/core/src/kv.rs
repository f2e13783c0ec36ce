//! Length-prefixed key/value blocks.
//!
//! Both the pipeline IR and the wire message bodies use this layout:
//!
//! ```text
//! count u8
//! repeated count times:
//!     key_len u16 | key (UTF-8) | value_len u32 | value bytes
//! ```
//!
//! All integers are little-endian. Keys are emitted in sorted order, which
//! makes the encoding canonical.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("truncated key/value block")]
    Truncated,
    #[error("too many entries ({0}, max 255)")]
    TooManyEntries(usize),
    #[error("key too long ({0} bytes)")]
    KeyTooLong(usize),
    #[error("key is not valid UTF-8")]
    BadKey,
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("bad value for key {key:?}: {reason}")]
    BadValue { key: String, reason: String },
}

/// A canonical, ordered key/value map with byte values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KvMap(BTreeMap<String, Vec<u8>>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn remove(&mut self, key: &str) -> Option<Vec<u8>> {
        self.0.remove(key)
    }

    pub fn put_bytes(&mut self, key: &str, value: impl Into<Vec<u8>>) -> &mut Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn put_u64(&mut self, key: &str, value: u64) -> &mut Self {
        self.put_bytes(key, value.to_le_bytes().to_vec())
    }

    pub fn put_str(&mut self, key: &str, value: &str) -> &mut Self {
        self.put_bytes(key, value.as_bytes().to_vec())
    }

    pub fn put_bool(&mut self, key: &str, value: bool) -> &mut Self {
        self.put_bytes(key, vec![value as u8])
    }

    pub fn put_u64_list(&mut self, key: &str, values: &[u64]) -> &mut Self {
        let mut out = Vec::with_capacity(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(key, out)
    }

    /// Stores a list of opaque blobs, each prefixed with a u32 length.
    pub fn put_list(&mut self, key: &str, items: &[Vec<u8>]) -> &mut Self {
        let mut out = Vec::new();
        for item in items {
            out.extend_from_slice(&(item.len() as u32).to_le_bytes());
            out.extend_from_slice(item);
        }
        self.put_bytes(key, out)
    }

    pub fn bytes(&self, key: &str) -> Result<&[u8], KvError> {
        self.0
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn opt_bytes(&self, key: &str) -> Option<&[u8]> {
        self.0.get(key).map(Vec::as_slice)
    }

    pub fn u64(&self, key: &str) -> Result<u64, KvError> {
        let raw = self.bytes(key)?;
        let arr: [u8; 8] = raw.try_into().map_err(|_| KvError::BadValue {
            key: key.to_string(),
            reason: format!("expected 8 bytes, got {}", raw.len()),
        })?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, KvError> {
        if self.contains(key) {
            self.u64(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn str(&self, key: &str) -> Result<&str, KvError> {
        std::str::from_utf8(self.bytes(key)?).map_err(|_| KvError::BadValue {
            key: key.to_string(),
            reason: "not UTF-8".into(),
        })
    }

    pub fn bool(&self, key: &str) -> Result<bool, KvError> {
        match self.bytes(key)? {
            [0] => Ok(false),
            [1] => Ok(true),
            other => Err(KvError::BadValue {
                key: key.to_string(),
                reason: format!("bad bool {other:?}"),
            }),
        }
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>, KvError> {
        let raw = self.bytes(key)?;
        if raw.len() % 8 != 0 {
            return Err(KvError::BadValue {
                key: key.to_string(),
                reason: "list length not a multiple of 8".into(),
            });
        }
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn list(&self, key: &str) -> Result<Vec<&[u8]>, KvError> {
        let raw = self.bytes(key)?;
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < raw.len() {
            let len = read_u32(raw, pos).ok_or_else(|| KvError::BadValue {
                key: key.to_string(),
                reason: "truncated list".into(),
            })? as usize;
            pos += 4;
            let item = raw.get(pos..pos + len).ok_or_else(|| KvError::BadValue {
                key: key.to_string(),
                reason: "truncated list item".into(),
            })?;
            out.push(item);
            pos += len;
        }
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), KvError> {
        if self.0.len() > u8::MAX as usize {
            return Err(KvError::TooManyEntries(self.0.len()));
        }
        out.push(self.0.len() as u8);
        for (k, v) in &self.0 {
            if k.len() > u16::MAX as usize {
                return Err(KvError::KeyTooLong(k.len()));
            }
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, KvError> {
        let mut out = Vec::new();
        self.encode_into(&mut out)?;
        Ok(out)
    }

    /// Decodes one block starting at `buf[0]`, returning the map and the
    /// number of bytes consumed.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Self, usize), KvError> {
        let count = *buf.first().ok_or(KvError::Truncated)? as usize;
        let mut pos = 1;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let klen = read_u16(buf, pos).ok_or(KvError::Truncated)? as usize;
            pos += 2;
            let key = buf.get(pos..pos + klen).ok_or(KvError::Truncated)?;
            let key = std::str::from_utf8(key)
                .map_err(|_| KvError::BadKey)?
                .to_string();
            pos += klen;
            let vlen = read_u32(buf, pos).ok_or(KvError::Truncated)? as usize;
            pos += 4;
            let value = buf.get(pos..pos + vlen).ok_or(KvError::Truncated)?.to_vec();
            pos += vlen;
            if map.insert(key.clone(), value).is_some() {
                return Err(KvError::DuplicateKey(key));
            }
        }
        Ok((KvMap(map), pos))
    }

    /// Decodes a block that must span the whole buffer.
    pub fn decode(buf: &[u8]) -> Result<Self, KvError> {
        let (map, used) = Self::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(KvError::BadValue {
                key: String::new(),
                reason: format!("{} trailing bytes", buf.len() - used),
            });
        }
        Ok(map)
    }
}

pub(crate) fn read_u16(buf: &[u8], pos: usize) -> Option<u16> {
    buf.get(pos..pos + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
}

pub(crate) fn read_u32(buf: &[u8], pos: usize) -> Option<u32> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut m = KvMap::new();
        m.put_bytes("b", vec![7]).put_u64("a", 1);
        let enc = m.encode().unwrap();
        let mut expected = vec![2u8];
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(b"a");
        expected.extend_from_slice(&8u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(b"b");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(7);
        assert_eq!(enc, expected);
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let mut m = KvMap::new();
        m.put_str("name", "job").put_u64_list("xs", &[1, 2, 3]);
        let enc = m.encode().unwrap();
        for cut in 0..enc.len() {
            assert!(KvMap::decode(&enc[..cut]).is_err(), "cut at {cut}");
        }
        assert_eq!(KvMap::decode(&enc).unwrap(), m);
    }

    #[test]
    fn nested_lists() {
        let mut m = KvMap::new();
        m.put_list("items", &[vec![1, 2], vec![], vec![3]]);
        let back = KvMap::decode(&m.encode().unwrap()).unwrap();
        let items = back.list("items").unwrap();
        assert_eq!(items, vec![&[1u8, 2][..], &[][..], &[3][..]]);
    }

    #[test]
    fn rejects_too_many_entries() {
        let mut m = KvMap::new();
        for i in 0..256 {
            m.put_u64(&format!("k{i}"), i);
        }
        assert_eq!(m.encode(), Err(KvError::TooManyEntries(256)));
    }
}
