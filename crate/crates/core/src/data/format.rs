//! `RSTM` sequence files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "RSTM"
//! 4       4     format version (u32) = 1
//! 8       8     L, frame count (u64)
//! 16      4     dim (u32)
//! 20      4     cond_dim (u32)
//! 24      4     style id (u32)
//! 28      4     fps (f32)
//! 32      ...   L*dim f32 frames, row-major, then L*cond_dim f32 conditioning
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, SequenceStore};

pub const SEQUENCE_MAGIC: [u8; 4] = *b"RSTM";
pub const SEQUENCE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

pub fn write_sequence<W: Write>(store: &SequenceStore, mut w: W) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (store.frames.len() + store.cond.len()));
    buf.extend_from_slice(&SEQUENCE_MAGIC);
    buf.extend_from_slice(&SEQUENCE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(store.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(store.cond_dim as u32).to_le_bytes());
    buf.extend_from_slice(&store.style.to_le_bytes());
    buf.extend_from_slice(&store.fps.to_le_bytes());
    for v in store.frames.iter().chain(&store.cond) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parse a complete sequence file image.
pub fn read_sequence<R: Read>(mut r: R) -> Result<SequenceStore, DataError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<SequenceStore, DataError> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: HEADER_LEN as u64, actual });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != SEQUENCE_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN as u64, actual });
    }
    let version = u32_at(bytes, 4);
    if version != SEQUENCE_VERSION {
        return Err(DataError::Version(version));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32_at(bytes, 16) as u64;
    let cond_dim = u32_at(bytes, 20) as u64;
    let style = u32_at(bytes, 24);
    let fps = f32::from_le_bytes(bytes[28..32].try_into().unwrap());
    if dim == 0 || cond_dim == 0 {
        return Err(DataError::Header(format!("dim ({dim}) and cond_dim ({cond_dim}) must be positive")));
    }
    let payload = len
        .checked_mul(dim + cond_dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| DataError::Header(format!("frame count {len} overflows")))?;
    if actual < payload {
        return Err(DataError::Truncated { expected: payload, actual });
    }
    if actual > payload {
        return Err(DataError::TrailingBytes { extra: actual - payload });
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let split = (len * dim) as usize;
    let cond = floats[split..].to_vec();
    let mut frames = floats;
    frames.truncate(split);
    SequenceStore::new(dim as usize, cond_dim as usize, style, fps, frames, cond)
}

pub fn save_sequence(path: impl AsRef<Path>, store: &SequenceStore) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_sequence(store, std::io::BufWriter::new(file))
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<SequenceStore, DataError> {
    let bytes = std::fs::read(path)?;
    parse(&bytes)
}

/// Human-readable dump: one row per frame, pose columns then conditioning.
pub fn export_csv<W: Write>(store: &SequenceStore, w: W) -> Result<(), DataError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["frame".to_string()];
    header.extend((0..store.dim).map(|k| format!("x{k}")));
    header.extend((0..store.cond_dim).map(|k| format!("u{k}")));
    out.write_record(&header).map_err(csv_err)?;
    for i in 0..store.len() {
        let mut row = vec![i.to_string()];
        row.extend(store.frame(i).iter().map(|v| v.to_string()));
        row.extend(store.cond_row(i).iter().map(|v| v.to_string()));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> DataError {
    DataError::Io(std::io::Error::other(e))
}
