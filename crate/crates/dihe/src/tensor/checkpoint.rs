//! Weight checkpoint format.
//!
//! Layout: magic `DIHEWT1\0`, u32-le parameter count, then per parameter:
//! u16-le name length, UTF-8 name, u8 rank, u32-le size per dimension,
//! raw little-endian f32 data.

use super::Tensor;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DIHEWT1\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("parameter name is not valid utf-8")]
    BadName,
    #[error("trailing bytes after last parameter")]
    TrailingBytes,
}

pub fn encode(params: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32()?;
    let mut params = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated)?;
        let raw = r.take(len.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &[(String, Tensor<f32>)]) -> Result<(), CheckpointError> {
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    decode(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let params = vec![
            ("enc.conv1.kernel".to_string(), Tensor::from_f64(vec![2, 2, 1, 3], &[0.5; 12])),
            ("enc.conv1.bias".to_string(), Tensor::from_f64(vec![3], &[-1.25, 0.0, 7.5])),
        ];
        let bytes = encode(&params);
        let back = decode(&bytes).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let bytes = encode(&[]);
        assert_eq!(decode(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&[]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_is_rejected() {
        let params = vec![("w".to_string(), Tensor::from_f64(vec![4], &[1.0, 2.0, 3.0, 4.0]))];
        let bytes = encode(&params);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 2]),
            Err(CheckpointError::Truncated)
        ));
    }
}
