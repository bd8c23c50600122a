//! Binary tensor container ("DPT1").
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DPT1"
//! u32   record count
//! u64   payload byte length
//! u64   FNV-1a64 checksum of the payload
//! N x { u16 name_len, name, u8 dtype (0 = f32), u8 ndim, u32 dims[ndim],
//!       u64 offset, u64 byte_len }
//! payload
//! ```
//!
//! Offsets are relative to the payload start and 8-byte aligned; records may
//! not overlap. The encoder writes records sorted by name with tensors laid
//! out in the same order, so encoding is canonical: equal stores produce
//! byte-equal blobs.

use crate::store::{Fnv1a64, TensorStore};
use crate::tensor::Tensor;

use super::ModelIoError;

pub const BLOB_MAGIC: &[u8; 4] = b"DPT1";

const MAX_RECORDS: u32 = 1 << 20;
const MAX_NDIM: u8 = 4;

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

/// Serialize a store. Canonical: sorted names, packed aligned payload.
pub fn encode_blob(store: &TensorStore) -> Vec<u8> {
    let mut index = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in store.iter() {
        let offset = align8(payload.len());
        payload.resize(offset, 0);
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        index.push((name.to_string(), tensor.shape().to_vec(), offset as u64));
    }
    let mut h = Fnv1a64::new();
    h.update(&payload);
    let checksum = h.finish();

    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&checksum.to_le_bytes());
    for (name, shape, offset) in &index {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0); // dtype f32
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let byte_len = shape.iter().product::<usize>() as u64 * 4;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&byte_len.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: "blob index truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }
}

/// Decode a blob. Never panics on malformed input; truncation or payload
/// corruption yields [`ModelIoError::ChecksumMismatch`], structural problems
/// yield [`ModelIoError::Parse`].
pub fn decode_blob(bytes: &[u8]) -> Result<TensorStore, ModelIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != BLOB_MAGIC {
        return Err(ModelIoError::Parse {
            line: 0,
            detail: "bad blob magic".into(),
        });
    }
    let count = r.u32()?;
    if count > MAX_RECORDS {
        return Err(ModelIoError::Parse {
            line: 0,
            detail: format!("record count {count} out of range"),
        });
    }
    let payload_len = r.u64()? as usize;
    let checksum = r.u64()?;

    let mut records = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_bytes = r.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| ModelIoError::Parse {
                line: 0,
                detail: "tensor name is not valid UTF-8".into(),
            })?
            .to_string();
        if name.is_empty()
            || !name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || b == b'-')
        {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("invalid tensor name `{name}`"),
            });
        }
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("unsupported dtype {dtype}"),
            });
        }
        let ndim = r.u8()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("unsupported rank {ndim}"),
            });
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut elements = 1u64;
        for _ in 0..ndim {
            let d = r.u32()? as u64;
            elements = elements.saturating_mul(d);
            shape.push(d as usize);
        }
        if elements > (1 << 32) {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: "tensor too large".into(),
            });
        }
        let offset = r.u64()? as usize;
        let byte_len = r.u64()? as usize;
        if byte_len as u64 != elements * 4 {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("record `{name}` length {byte_len} does not match shape {shape:?}"),
            });
        }
        if !offset.is_multiple_of(8) {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("record `{name}` offset {offset} is not 8-byte aligned"),
            });
        }
        let end = offset.checked_add(byte_len).ok_or(ModelIoError::Parse {
            line: 0,
            detail: "record range overflow".into(),
        })?;
        if end > payload_len {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("record `{name}` extends past payload"),
            });
        }
        records.push((name, shape, offset, byte_len));
    }

    // overlap check
    let mut spans: Vec<(usize, usize, &str)> = records
        .iter()
        .map(|(n, _, o, l)| (*o, *o + *l, n.as_str()))
        .collect();
    spans.sort();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("records `{}` and `{}` overlap", pair[0].2, pair[1].2),
            });
        }
    }

    let payload = &bytes[r.pos..];
    if payload.len() != payload_len {
        // truncated or padded payload: the declared checksum cannot be
        // validated against what is actually present
        return Err(ModelIoError::ChecksumMismatch);
    }
    let mut h = Fnv1a64::new();
    h.update(payload);
    if h.finish() != checksum {
        return Err(ModelIoError::ChecksumMismatch);
    }

    let mut store = TensorStore::new();
    for (name, shape, offset, byte_len) in records {
        if store.contains(&name) {
            return Err(ModelIoError::Parse {
                line: 0,
                detail: format!("duplicate tensor `{name}`"),
            });
        }
        let data: Vec<f32> = payload[offset..offset + byte_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).expect("length verified above");
        store.insert(name, tensor);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> TensorStore {
        let mut s = TensorStore::new();
        s.insert("conv.w", Tensor::new(vec![2, 1, 1, 1], vec![0.5, -0.5]).unwrap());
        s.insert("conv.b", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        s
    }

    #[test]
    fn round_trip() {
        let store = sample_store();
        let blob = encode_blob(&store);
        let back = decode_blob(&blob).unwrap();
        assert_eq!(store, back);
        // canonical: re-encoding is byte-identical
        assert_eq!(encode_blob(&back), blob);
    }

    #[test]
    fn truncation_is_checksum_mismatch() {
        let blob = encode_blob(&sample_store());
        let cut = &blob[..blob.len() - 3];
        assert!(matches!(
            decode_blob(cut),
            Err(ModelIoError::ChecksumMismatch)
        ));
    }

    #[test]
    fn corrupt_payload_is_checksum_mismatch() {
        let mut blob = encode_blob(&sample_store());
        let last = blob.len() - 1;
        blob[last] ^= 0xff;
        assert!(matches!(
            decode_blob(&blob),
            Err(ModelIoError::ChecksumMismatch)
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut blob = encode_blob(&sample_store());
        blob[0] = b'X';
        assert!(matches!(decode_blob(&blob), Err(ModelIoError::Parse { .. })));
    }

    #[test]
    fn overlapping_records_rejected() {
        // two records pointing at the same payload bytes
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&8u64.to_le_bytes());
        let payload = [0u8; 8];
        let mut h = Fnv1a64::new();
        h.update(&payload);
        out.extend_from_slice(&h.finish().to_le_bytes());
        for name in [b"a", b"b"] {
            out.extend_from_slice(&1u16.to_le_bytes());
            out.extend_from_slice(name);
            out.push(0);
            out.push(1);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&0u64.to_le_bytes());
            out.extend_from_slice(&8u64.to_le_bytes());
        }
        out.extend_from_slice(&payload);
        let err = decode_blob(&out).unwrap_err();
        assert!(matches!(err, ModelIoError::Parse { detail, .. } if detail.contains("overlap")));
    }
}
