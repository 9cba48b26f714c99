//! `CVT1` raw tensor container.
//!
//! Layout: magic `CVT1`, one dtype byte (1 = f32, 2 = f64), u32 LE rank,
//! `rank` u32 LE extents, then the row-major LE payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format {
                what: "CVT1 header",
                detail: format!("unknown dtype byte {other}"),
            }),
        }
    }
}

pub fn write_cvt1<T: Real, W: Write>(mut w: W, t: &Tensor<T>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * t.rank() + t.len() * T::DTYPE.width());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE as u8);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

/// Reads either dtype, converting to `T`.
pub fn read_cvt1<T: Real, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format {
        what: "CVT1 stream",
        detail: e.to_string(),
    })?;
    parse(&bytes)
}

fn parse<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |detail: String| Error::Format {
        what: "CVT1 stream",
        detail,
    };
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("missing CVT1 magic".into()));
    }
    let dtype = DType::from_byte(bytes[4])?;
    let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header = 9 + 4 * rank;
    if bytes.len() < header {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 9 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n * dtype.width() {
        return Err(bad(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            payload.len(),
            n * dtype.width()
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::read_le(c))))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&dims, data)
}

pub fn write_cvt1_file<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cvt1(std::io::BufWriter::new(file), t).map_err(|e| Error::io(path, e))
}

pub fn read_cvt1_file<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}
