//! Binary serialization of CP models: the `CPD1` format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"CPD1"
//! rank    u32
//! axes    u32                      (m)
//! len_j   u32 x m                  (axis lengths)
//! w       f64 x rank
//! A_j     f64 x (len_j * rank)     column-major, for j = 0 .. m-1
//! ```
//!
//! The payload is exact: round-tripping a model preserves every `f64` bit
//! pattern. Readers reject bad magic, truncated payloads, and trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use super::CpModel;

/// Per-factor element ceiling when reading untrusted files (800 MB of f64s).
const MAX_FACTOR_ELEMENTS: u64 = 100_000_000;

pub const MAGIC: [u8; 4] = *b"CPD1";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {got:?}, expected {MAGIC:?}")]
    BadMagic { got: [u8; 4] },
    #[error("truncated payload while reading {section}")]
    Truncated { section: &'static str },
    #[error("trailing bytes after the final factor")]
    TrailingBytes,
    #[error("declared {what} {got} is out of range")]
    FieldRange { what: &'static str, got: u64 },
    #[error("decoded model is malformed: {0}")]
    Malformed(#[from] super::TensorError),
}

pub fn write_model<W: Write>(out: &mut W, model: &CpModel) -> Result<(), CodecError> {
    let rank = model.rank();
    let axes = model.axis_count();
    if rank > u32::MAX as usize {
        return Err(CodecError::FieldRange {
            what: "rank",
            got: rank as u64,
        });
    }
    if axes > u32::MAX as usize {
        return Err(CodecError::FieldRange {
            what: "axis count",
            got: axes as u64,
        });
    }
    out.write_all(&MAGIC)?;
    out.write_all(&(rank as u32).to_le_bytes())?;
    out.write_all(&(axes as u32).to_le_bytes())?;
    for j in 0..axes {
        let len = model.factor(j).nrows();
        if len > u32::MAX as usize {
            return Err(CodecError::FieldRange {
                what: "axis length",
                got: len as u64,
            });
        }
        out.write_all(&(len as u32).to_le_bytes())?;
    }
    for &w in model.weights() {
        out.write_all(&w.to_le_bytes())?;
    }
    for j in 0..axes {
        // nalgebra stores matrices column-major, which is the wire order.
        for &v in model.factor(j).as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(input: &mut R) -> Result<CpModel, CodecError> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CodecError::BadMagic { got: magic });
    }
    let rank = read_u32(input, "rank")? as usize;
    if rank == 0 {
        return Err(CodecError::FieldRange {
            what: "rank",
            got: 0,
        });
    }
    let axes = read_u32(input, "axis count")? as usize;
    if axes == 0 {
        return Err(CodecError::FieldRange {
            what: "axis count",
            got: 0,
        });
    }
    let mut lens = Vec::with_capacity(axes);
    for _ in 0..axes {
        let len = read_u32(input, "axis length")? as usize;
        if len == 0 || (len as u64) * (rank as u64) > MAX_FACTOR_ELEMENTS {
            return Err(CodecError::FieldRange {
                what: "axis length",
                got: len as u64,
            });
        }
        lens.push(len);
    }
    let mut weights = Vec::with_capacity(rank);
    for _ in 0..rank {
        weights.push(read_f64(input, "weights")?);
    }
    let mut factors = Vec::with_capacity(axes);
    for &len in &lens {
        let mut data = Vec::with_capacity(len * rank);
        for _ in 0..len * rank {
            data.push(read_f64(input, "factor")?);
        }
        factors.push(DMatrix::from_column_slice(len, rank, &data));
    }
    let mut probe = [0u8; 1];
    match input.read(&mut probe)? {
        0 => {}
        _ => return Err(CodecError::TrailingBytes),
    }
    Ok(CpModel::new(weights, factors)?)
}

pub fn save_model(path: &Path, model: &CpModel) -> Result<(), CodecError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CpModel, CodecError> {
    let mut input = BufReader::new(File::open(path)?);
    read_model(&mut input)
}

fn read_exact<R: Read>(
    input: &mut R,
    buf: &mut [u8],
    section: &'static str,
) -> Result<(), CodecError> {
    input.read_exact(buf).map_err(|err| {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            CodecError::Truncated { section }
        } else {
            CodecError::Io(err)
        }
    })
}

fn read_u32<R: Read>(input: &mut R, section: &'static str) -> Result<u32, CodecError> {
    let mut buf = [0u8; 4];
    read_exact(input, &mut buf, section)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(input: &mut R, section: &'static str) -> Result<f64, CodecError> {
    let mut buf = [0u8; 8];
    read_exact(input, &mut buf, section)?;
    Ok(f64::from_le_bytes(buf))
}
