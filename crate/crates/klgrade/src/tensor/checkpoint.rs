//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"KLGC"
//! u32    format version (currently 1)
//! u32    header length, followed by that many bytes of JSON metadata
//! u32    tensor count
//! per tensor:
//!   u16       name length + UTF-8 name
//!   u8        rank
//!   u32*rank  extents
//!   f64*numel payload
//! ```
//!
//! f64 payloads are stored as raw IEEE-754 bits, so save -> load round-trips
//! bit-exactly. The reader validates every declared length against the bytes
//! actually remaining before allocating.

use std::io::Write;
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"KLGC";
const VERSION: u32 = 1;

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).ok_or_else(|| err("length overflow"))?;
        if end > self.bytes.len() {
            return Err(err(format!(
                "truncated: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TensorError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TensorError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Serialize metadata plus named tensors.
pub fn save_bytes(meta: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let header = serde_json::to_vec(meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a checkpoint. Never panics on malformed input; every failure is a
/// structured error.
pub fn load_bytes(bytes: &[u8]) -> Result<(serde_json::Value, Vec<(String, Tensor)>), TensorError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(err("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header = r.take(header_len)?;
    let meta: serde_json::Value =
        serde_json::from_slice(header).map_err(|e| err(format!("bad metadata JSON: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank > 8 {
            return Err(err(format!("tensor '{name}' has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| err("tensor size overflow"))?;
            shape.push(d);
        }
        let byte_len = numel.checked_mul(8).ok_or_else(|| err("tensor size overflow"))?;
        if byte_len > r.remaining() {
            return Err(err(format!(
                "truncated: tensor '{name}' declares {numel} elements but only {} bytes remain",
                r.remaining()
            )));
        }
        let raw = r.take(byte_len)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data).map_err(|e| err(e.to_string()))?));
    }
    if r.remaining() != 0 {
        return Err(err(format!("{} trailing bytes after last tensor", r.remaining())));
    }
    Ok((meta, tensors))
}

pub fn save_file(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<(), TensorError> {
    let bytes = save_bytes(meta, tensors);
    let mut f = std::fs::File::create(path)
        .map_err(|e| err(format!("create {}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| err(format!("write {}: {e}", path.display())))?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>), TensorError> {
    let bytes =
        std::fs::read(path).map_err(|e| err(format!("read {}: {e}", path.display())))?;
    load_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let t1 = Tensor::new(vec![2, 3], vec![0.1, -2.5e300, 3.0, f64::MIN_POSITIVE, 0.0, 7.25])
            .unwrap();
        let t2 = Tensor::new(vec![1], vec![42.0]).unwrap();
        let meta = json!({"arch": "test", "seed": 7});
        let bytes = save_bytes(&meta, &[("w", &t1), ("b", &t2)]);
        let (meta2, tensors) = load_bytes(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "w");
        assert_eq!(tensors[0].1.shape(), &[2, 3]);
        for (a, b) in tensors[0].1.data().iter().zip(t1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(load_bytes(b"").is_err());
        assert!(load_bytes(b"NOPE").is_err());
        let good = save_bytes(&json!({}), &[("t", &Tensor::zeros(vec![4]))]);
        for cut in [3, 8, 12, good.len() - 1] {
            assert!(load_bytes(&good[..cut]).is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn rejects_oversized_declared_tensor() {
        // Declare a huge tensor with no payload; must error, not allocate.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"KLGC");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(2); // rank 2
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(load_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut good = save_bytes(&json!({}), &[]);
        good.push(0);
        assert!(load_bytes(&good).is_err());
    }
}
