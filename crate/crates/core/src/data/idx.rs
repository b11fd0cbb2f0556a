//! IDX binary arrays (the MNIST file format).
//!
//! Layout: magic `00 00 <dtype> <ndims>`, then `ndims` big-endian `u32`
//! extents, then the row-major payload (big-endian for multi-byte types).
//! Supported dtypes are `0x08` (unsigned byte, rescaled to `[0, 1]` on read)
//! and `0x0D` (32-bit float).
//!
//! Parse errors carry the byte offset of the fault:
//!
//! | fault                         | offset                    |
//! |-------------------------------|---------------------------|
//! | first two bytes not zero      | 0                         |
//! | unsupported dtype             | 2                         |
//! | zero dimensions               | 3                         |
//! | zero extent `i`               | `4 + 4i`                  |
//! | truncated magic/header/payload| file length               |
//! | trailing bytes                | end of the declared payload |

use std::path::Path;

use crate::error::{MudaError, Result};
use crate::ndcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxDtype {
    U8,
    F32,
}

impl IdxDtype {
    pub fn code(self) -> u8 {
        match self {
            IdxDtype::U8 => 0x08,
            IdxDtype::F32 => 0x0D,
        }
    }

    fn width(self) -> usize {
        match self {
            IdxDtype::U8 => 1,
            IdxDtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxData {
    pub dtype: IdxDtype,
    pub tensor: Tensor,
}

fn parse_err(offset: usize, message: impl Into<String>) -> MudaError {
    MudaError::Parse {
        offset,
        message: message.into(),
    }
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(
            0,
            format!("bad magic {:02x} {:02x}, expected 00 00", bytes[0], bytes[1]),
        ));
    }
    let dtype = match bytes[2] {
        0x08 => IdxDtype::U8,
        0x0D => IdxDtype::F32,
        other => return Err(parse_err(2, format!("unsupported dtype 0x{other:02x}"))),
    };
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let header_end = 4 + 4 * ndims;
    if bytes.len() < header_end {
        return Err(parse_err(
            bytes.len(),
            format!("truncated header, expected {ndims} dimensions"),
        ));
    }
    let mut shape = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let at = 4 + 4 * i;
        let d = u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(parse_err(at, format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "element count overflows"))?;
    let payload_end = count
        .checked_mul(dtype.width())
        .and_then(|b| b.checked_add(header_end))
        .ok_or_else(|| parse_err(4, "payload size overflows"))?;
    if bytes.len() < payload_end {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload, expected {} bytes", payload_end - header_end),
        ));
    }
    if bytes.len() > payload_end {
        return Err(parse_err(
            payload_end,
            format!("{} trailing bytes", bytes.len() - payload_end),
        ));
    }
    let payload = &bytes[header_end..payload_end];
    let data: Vec<f64> = match dtype {
        IdxDtype::U8 => payload.iter().map(|&b| b as f64 / 255.0).collect(),
        IdxDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok(IdxData {
        dtype,
        tensor: Tensor::new(shape, data)?,
    })
}

pub fn encode_idx(data: &IdxData) -> Result<Vec<u8>> {
    let shape = data.tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(MudaError::Validation("too many dimensions for IDX".into()));
    }
    let mut out = vec![0, 0, data.dtype.code(), shape.len() as u8];
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| MudaError::Validation(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    match data.dtype {
        IdxDtype::U8 => {
            for &v in data.tensor.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MudaError::Validation(format!("value {v} outside [0, 1] for u8 IDX")));
                }
                out.push((v * 255.0).round() as u8);
            }
        }
        IdxDtype::F32 => {
            for &v in data.tensor.data() {
                out.extend_from_slice(&(v as f32).to_be_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_idx_file(path: impl AsRef<Path>) -> Result<IdxData> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| MudaError::io(&path, e))?;
    decode_idx(&bytes)
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_idx_file(path)?.tensor)
}

pub fn write_idx(path: impl AsRef<Path>, data: &IdxData) -> Result<()> {
    let bytes = encode_idx(data)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| MudaError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> Vec<u8> {
        let mut f = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        f.extend(0u8..8);
        f
    }

    #[test]
    fn hand_built_u8_file() {
        let d = decode_idx(&cube()).unwrap();
        assert_eq!(d.dtype, IdxDtype::U8);
        assert_eq!(d.tensor.shape(), &[2, 2, 2]);
        let expected: Vec<f64> = (0..8).map(|v| v as f64 / 255.0).collect();
        assert_eq!(d.tensor.data(), expected.as_slice());
        assert_eq!(encode_idx(&d).unwrap(), cube());
    }

    #[test]
    fn error_offsets() {
        let f = cube();
        let offset = |bytes: &[u8]| match decode_idx(bytes) {
            Err(MudaError::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(offset(&f[..f.len() - 3]), f.len() - 3);
        let mut bad = f.clone();
        bad[1] = 1;
        assert_eq!(offset(&bad), 0);
        let mut bad = f.clone();
        bad[2] = 0x0B;
        assert_eq!(offset(&bad), 2);
        assert_eq!(offset(&f[..10]), 10);
        let mut bad = f.clone();
        bad.push(0);
        assert_eq!(offset(&bad), 24);
    }
}
