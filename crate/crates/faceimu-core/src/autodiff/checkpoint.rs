//! Binary container for named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! | field   | size | contents                        |
//! |---------|------|---------------------------------|
//! | magic   | 4    | "IMFD"                          |
//! | version | u16  | 1                               |
//! | count   | u32  | number of tensors               |
//!
//! then per tensor:
//!
//! | field    | size      | contents                   |
//! |----------|-----------|----------------------------|
//! | name_len | u16       | UTF-8 byte length          |
//! | name     | name_len  |                            |
//! | dtype    | u8        | 1 = f32, 2 = f64           |
//! | ndim     | u8        | always 2                   |
//! | dims     | u32 * 2   | rows, cols                 |
//! | payload  | 4 or 8 * rows * cols | little-endian scalars, row-major |

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

use super::{AutodiffError, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IMFD";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("container truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("bad magic {got:02x?}, expected \"IMFD\"")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported container version {got}")]
    BadVersion { got: u16 },
    #[error("unknown dtype tag {got}")]
    BadDtype { got: u8 },
    #[error("tensor rank {got} unsupported, expected 2")]
    BadRank { got: u8 },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor name of {got} bytes exceeds the u16 length field")]
    NameTooLong { got: usize },
    #[error("dimension {got} exceeds the u32 dims field")]
    DimTooLarge { got: usize },
    #[error("declared shape is invalid: {source}")]
    BadShape {
        #[from]
        source: AutodiffError,
    },
    #[error("trailing {got} bytes after the last tensor")]
    TrailingBytes { got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub payload: Payload,
}

impl Entry {
    pub fn from_tensor_f64(name: impl Into<String>, t: &Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            rows: t.rows(),
            cols: t.cols(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn from_tensor_f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            rows: t.rows(),
            cols: t.cols(),
            payload: Payload::F32(t.data().to_vec()),
        }
    }

    /// The payload as a tensor of the requested precision, converting if
    /// the stored dtype differs.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, AutodiffError> {
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::new(self.rows, self.cols, data)
    }
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::NameTooLong { got: name.len() });
        }
        for dim in [e.rows, e.cols] {
            if dim > u32::MAX as usize {
                return Err(CheckpointError::DimTooLarge { got: dim });
            }
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        match &e.payload {
            Payload::F32(data) => {
                out.push(1);
                out.push(2);
                out.extend_from_slice(&(e.rows as u32).to_le_bytes());
                out.extend_from_slice(&(e.cols as u32).to_le_bytes());
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::F64(data) => {
                out.push(2);
                out.push(2);
                out.extend_from_slice(&(e.rows as u32).to_le_bytes());
                out.extend_from_slice(&(e.cols as u32).to_le_bytes());
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { what });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { got: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = cur.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let count = cur.u32("count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16("name length")? as usize;
        let name = core::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadName)?;
        let dtype = cur.u8("dtype")?;
        let ndim = cur.u8("ndim")?;
        if ndim != 2 {
            return Err(CheckpointError::BadRank { got: ndim });
        }
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or(CheckpointError::DimTooLarge { got: rows.max(cols) })?;
        let payload = match dtype {
            1 => {
                let raw = cur.take(4 * n, "f32 payload")?;
                Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            2 => {
                let raw = cur.take(8 * n, "f64 payload")?;
                Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect(),
                )
            }
            got => return Err(CheckpointError::BadDtype { got }),
        };
        // Surfaces zero dims as an error instead of a bogus tensor later.
        if rows == 0 || cols == 0 {
            return Err(CheckpointError::BadShape {
                source: AutodiffError::EmptyTensor { rows, cols },
            });
        }
        entries.push(Entry { name: String::from(name), rows, cols, payload });
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes { got: bytes.len() - cur.pos });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use alloc::format;
    use alloc::vec;

    /// Frozen reference encoding: one f64 tensor named "w", shape 1x2,
    /// values [1.0, -2.0].
    const REFERENCE_HEX: &str =
        "494d464401000100000001007702020100000002000000000000000000f03f00000000000000c0";

    fn to_hex(bytes: &[u8]) -> String {
        use core::fmt::Write;
        let mut s = String::new();
        for b in bytes {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }

    #[test]
    fn reference_bytes_are_frozen() {
        let t = Tensor::new(1, 2, vec![1.0f64, -2.0]).unwrap();
        let bytes = encode(&[Entry::from_tensor_f64("w", &t)]).unwrap();
        assert_eq!(to_hex(&bytes), REFERENCE_HEX);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].to_tensor::<f64>().unwrap(), t);
    }

    #[test]
    fn round_trips_mixed_precision() {
        let mut rng = SeededRng::new(11);
        let a = Tensor::<f64>::randn(3, 7, 1.0, &mut rng);
        let b = Tensor::<f32>::randn(5, 2, 1.0, &mut rng);
        let entries = vec![
            Entry::from_tensor_f64("layers.0.weight", &a),
            Entry::from_tensor_f32("bias", &b),
        ];
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, entries);
        assert_eq!(back[0].to_tensor::<f64>().unwrap(), a);
        assert_eq!(back[1].to_tensor::<f32>().unwrap(), b);
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(decode(&bytes).unwrap(), Vec::new());
    }

    #[test]
    fn decode_error_cases() {
        let t = Tensor::new(2, 2, vec![0.0f64; 4]).unwrap();
        let good = encode(&[Entry::from_tensor_f64("p", &t)]).unwrap();

        assert!(matches!(decode(&good[..3]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(CheckpointError::BadVersion { got: 9 })));

        // name_len "p" = 1 at offset 10, name at 12, dtype at 13, ndim 14.
        let mut bad = good.clone();
        bad[13] = 7;
        assert!(matches!(decode(&bad), Err(CheckpointError::BadDtype { got: 7 })));

        let mut bad = good.clone();
        bad[14] = 3;
        assert!(matches!(decode(&bad), Err(CheckpointError::BadRank { got: 3 })));

        let mut bad = good.clone();
        bad[12] = 0xFF; // lone continuation byte
        assert!(matches!(decode(&bad), Err(CheckpointError::BadName)));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(CheckpointError::TrailingBytes { got: 1 })));
    }

    #[test]
    fn many_tensors_round_trip() {
        let mut rng = SeededRng::new(12);
        let entries: Vec<Entry> = (0..20)
            .map(|i| {
                let t = Tensor::<f64>::randn(1 + i % 5, 1 + i % 7, 2.0, &mut rng);
                Entry::from_tensor_f64(format!("param.{i}"), &t)
            })
            .collect();
        let bytes = encode(&entries).unwrap();
        assert_eq!(decode(&bytes).unwrap(), entries);
    }
}
