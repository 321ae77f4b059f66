//! "QTNS" raw tensor container.
//!
//! Layout: magic `QTNS`, u32 version, u8 dtype code, u8 rank, `rank` u64
//! extents, then the little-endian payload. All integers are little-endian.
//! Several records may be concatenated in one file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const QTNS_MAGIC: [u8; 4] = *b"QTNS";
pub const QTNS_VERSION: u32 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * tensor.shape().len() + tensor.numel() * 4);
    write_into(tensor, &mut out);
    out
}

pub fn write_into(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&QTNS_MAGIC);
    out.extend_from_slice(&QTNS_VERSION.to_le_bytes());
    out.push(tensor.dtype().code());
    out.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&tensor.payload_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Decodes one record from the front of `bytes`, returning the tensor and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "QTNS header")?;
    if magic != QTNS_MAGIC {
        return Err(Error::BadMagic {
            expected: QTNS_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let v = r.take(4, "QTNS header")?;
    let version = u32::from_le_bytes([v[0], v[1], v[2], v[3]]);
    if version != QTNS_VERSION {
        return Err(Error::VersionMismatch {
            expected: QTNS_VERSION,
            found: version,
        });
    }
    let code = r.take(1, "QTNS header")?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::invalid("qtns::decode", format!("unknown dtype code {code}")))?;
    let rank = r.take(1, "QTNS header")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.take(8, "QTNS extents")?;
        let extent = u64::from_le_bytes(e.try_into().expect("8 bytes"));
        shape.push(usize::try_from(extent).map_err(|_| {
            Error::invalid("qtns::decode", format!("extent {extent} exceeds address space"))
        })?);
    }
    let len = Tensor::payload_len(dtype, &shape);
    let payload = r.take(len, "QTNS payload")?;
    let tensor = Tensor::from_payload(dtype, &shape, payload)?;
    Ok((tensor, r.pos))
}

/// Decodes exactly one record; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::invalid(
            "qtns::decode",
            format!("{} trailing bytes after tensor record", bytes.len() - used),
        ));
    }
    Ok(t)
}

/// Decodes every concatenated record in `bytes`.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let (t, used) = decode_prefix(&bytes[pos..])?;
        out.push(t);
        pos += used;
    }
    Ok(out)
}

pub fn save(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(tensor)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_f32(&[1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"QTNS".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[0, 2]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn distinct_diagnostics() {
        let t = Tensor::from_i8(&[4], vec![1, 2, 3, 4]).unwrap();
        let good = encode(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode(&bad_version),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode(truncated), Err(Error::Truncated { .. })));
    }

    #[test]
    fn concatenated_records() {
        let a = Tensor::from_f32(&[2], vec![0.5, 0.25]).unwrap();
        let b = Tensor::from_i32(&[3], vec![7, 8, 9]).unwrap();
        let mut bytes = encode(&a);
        write_into(&b, &mut bytes);
        assert_eq!(decode_all(&bytes).unwrap(), vec![a, b]);
    }
}
