//! `DTEN` binary tensor format.
//!
//! ```text
//! b"DTEN" | version u8 (0x01) | dtype u8 (0 = f32, 1 = f64) | rank u8
//!        | rank x u32 LE extents | row-major payload, little endian
//! ```

use std::io::{Read, Write};

use super::{check_dims, DType, Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const DTEN_MAGIC: &[u8; 4] = b"DTEN";
pub const DTEN_VERSION: u8 = 0x01;

const STREAM: &str = "<dten stream>";

pub fn write_dten<W: Write>(t: &Tensor, w: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(DTEN_MAGIC);
    buf.push(DTEN_VERSION);
    buf.push(t.dtype.code());
    buf.push(t.rank() as u8);
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.dtype {
        DType::F32 => t
            .data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf).map_err(|e| Error::io(STREAM, e))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(STREAM, format!("truncated {what}")),
        _ => Error::io(STREAM, e),
    })
}

pub fn read_dten<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != DTEN_MAGIC {
        return Err(Error::format(STREAM, "bad magic, expected DTEN"));
    }
    if head[4] != DTEN_VERSION {
        return Err(Error::format(
            STREAM,
            format!("unsupported DTEN version {:#04x}", head[4]),
        ));
    }
    let dtype = DType::from_code(head[5])
        .ok_or_else(|| Error::format(STREAM, format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(STREAM, format!("invalid rank {rank}")));
    }
    let mut ext = vec![0u8; 4 * rank];
    read_exact(r, &mut ext, "extents")?;
    let dims: Vec<usize> = ext
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len = check_dims(&dims).map_err(|e| Error::format(STREAM, e.to_string()))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; len * width];
    read_exact(r, &mut payload, "payload")?;
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(Tensor { dims, dtype, data })
}
