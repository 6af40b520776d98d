//! Little-endian helpers shared by the binary artifact formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{NiffError, Result};

pub(crate) fn write_header(w: &mut impl Write, magic: &[u8; 8], version: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    Ok(())
}

/// Checks magic and version, both fatal on mismatch.
pub(crate) fn read_header(r: &mut impl Read, magic: &[u8; 8], version: u32, kind: &'static str) -> Result<()> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found).map_err(|e| truncated(kind, e))?;
    if &found != magic {
        return Err(NiffError::Format {
            kind,
            reason: format!("bad magic {:?}", String::from_utf8_lossy(&found)),
        });
    }
    let v = r.read_u32::<LittleEndian>().map_err(|e| truncated(kind, e))?;
    if v != version {
        return Err(NiffError::Version {
            kind,
            expected: version,
            found: v,
        });
    }
    Ok(())
}

pub(crate) fn truncated(kind: &'static str, e: std::io::Error) -> NiffError {
    NiffError::Format {
        kind,
        reason: format!("truncated or unreadable: {e}"),
    }
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str(r: &mut impl Read, kind: &'static str) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|e| truncated(kind, e))? as usize;
    if len > 1 << 20 {
        return Err(NiffError::Format {
            kind,
            reason: format!("string length {len} is implausible"),
        });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| truncated(kind, e))?;
    String::from_utf8(buf).map_err(|e| NiffError::Format {
        kind,
        reason: format!("invalid utf-8: {e}"),
    })
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, kind: &'static str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out).map_err(|e| truncated(kind, e))?;
    Ok(out)
}

pub(crate) fn write_shape(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    w.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &d in shape {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    Ok(())
}

pub(crate) fn read_shape(r: &mut impl Read, kind: &'static str) -> Result<Vec<usize>> {
    let rank = r.read_u32::<LittleEndian>().map_err(|e| truncated(kind, e))? as usize;
    if rank > 8 {
        return Err(NiffError::Format {
            kind,
            reason: format!("rank {rank} is implausible"),
        });
    }
    (0..rank)
        .map(|_| {
            r.read_u64::<LittleEndian>()
                .map(|d| d as usize)
                .map_err(|e| truncated(kind, e))
        })
        .collect()
}

/// Rejects trailing garbage after a complete record.
pub(crate) fn expect_eof(r: &mut impl Read, kind: &'static str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(NiffError::Format {
            kind,
            reason: "trailing bytes after end of record".into(),
        }),
    }
}
