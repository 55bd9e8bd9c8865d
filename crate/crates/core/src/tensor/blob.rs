//! Tensor blob files: little-endian, header = magic `ISQT`, dtype code
//! (0 = f32, 1 = i8, 2 = i32), rank (u8), dims (u32 each); payload = raw
//! row-major values.

use super::Shape;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_I8: u8 = 1;
pub const DTYPE_I32: u8 = 2;

const MAGIC: &[u8; 4] = b"ISQT";

/// In-memory form of a blob file.
#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Shape, Vec<f32>),
    I8(Shape, Vec<i8>),
    I32(Shape, Vec<i32>),
}

impl Blob {
    pub fn shape(&self) -> &Shape {
        match self {
            Blob::F32(s, _) | Blob::I8(s, _) | Blob::I32(s, _) => s,
        }
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            Blob::F32(..) => DTYPE_F32,
            Blob::I8(..) => DTYPE_I8,
            Blob::I32(..) => DTYPE_I32,
        }
    }
}

pub fn write_blob(path: &Path, blob: &Blob) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(blob.dtype_code());
    let dims = blob.shape().dims();
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match blob {
        Blob::F32(_, v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Blob::I8(_, v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Blob::I32(_, v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_blob(&bytes, &path.display().to_string())
}

fn parse_blob(bytes: &[u8], path: &str) -> Result<Blob> {
    let blob_err = |context: &str| Error::Blob {
        path: path.to_string(),
        context: context.to_string(),
    };
    if bytes.len() < 6 {
        return Err(blob_err("file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(blob_err("bad magic, expected ISQT"));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(blob_err("rank 0 is invalid"));
    }
    let header = 6 + rank * 4;
    if bytes.len() < header {
        return Err(blob_err("truncated dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + i * 4;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        dims.push(d);
    }
    let shape = Shape::new(dims)?;
    let count = shape.len();
    let payload = &bytes[header..];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_I8 => 1,
        DTYPE_I32 => 4,
        other => return Err(blob_err(&format!("unknown dtype code {other}"))),
    };
    if payload.len() != count * elem {
        return Err(blob_err(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * elem
        )));
    }
    match dtype {
        DTYPE_F32 => {
            let mut v = Vec::with_capacity(count);
            for i in 0..count {
                v.push(f32::from_le_bytes(
                    payload[i * 4..i * 4 + 4].try_into().unwrap(),
                ));
            }
            Ok(Blob::F32(shape, v))
        }
        DTYPE_I8 => Ok(Blob::I8(shape, payload.iter().map(|&b| b as i8).collect())),
        DTYPE_I32 => {
            let mut v = Vec::with_capacity(count);
            for i in 0..count {
                v.push(i32::from_le_bytes(
                    payload[i * 4..i * 4 + 4].try_into().unwrap(),
                ));
            }
            Ok(Blob::I32(shape, v))
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn blob_round_trips_all_dtypes() {
        let dir = tempdir().unwrap();
        let shape = Shape::new(vec![2, 3]).unwrap();
        let cases = vec![
            Blob::F32(shape.clone(), vec![0.5, -1.25, 3.0, 0.0, 1e-5, -7.5]),
            Blob::I8(shape.clone(), vec![-127, 0, 1, 2, 3, 127]),
            Blob::I32(shape, vec![i32::MIN, -1, 0, 1, 42, i32::MAX]),
        ];
        for (i, blob) in cases.into_iter().enumerate() {
            let path = dir.path().join(format!("t{i}.bin"));
            write_blob(&path, &blob).unwrap();
            let back = read_blob(&path).unwrap();
            assert_eq!(back, blob);
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x00\x01\x01\x00\x00\x00").unwrap();
        let err = read_blob(&path).unwrap_err();
        assert_eq!(err.code(), "tensor/blob");
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"ISQT");
        bytes.push(DTYPE_F32);
        bytes.push(1);
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // only one of four values
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_blob(&path).is_err());
    }
}
