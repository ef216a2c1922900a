//! Binary dataset cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "EENEDDS1"
//! rows     u64
//! t_in     u64
//! features rows * t_in f32, row-major
//! labels   rows u8 (0/1)
//! split    rows u8 (0 unassigned, 1 train, 2 test)
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use super::{Dataset, SplitTag};
use crate::codec::{put_f32s, Reader};
use crate::error::{Error, FormatError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"EENEDDS1";

pub fn encode_cache(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + ds.features().len() * 4 + 2 * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.t_in() as u64).to_le_bytes());
    put_f32s(&mut out, ds.features());
    out.extend_from_slice(ds.labels());
    out.extend(ds.tags().iter().map(|&t| t as u8));
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let rows = r.u64("row count")? as usize;
    let t_in = r.u64("t_in")? as usize;
    let numel = rows
        .checked_mul(t_in)
        .ok_or_else(|| FormatError::Truncated("features".into()))?;
    let x = r.f32s(numel, "features")?;
    let y = r.take(rows, "labels")?.to_vec();
    let tags = r
        .take(rows, "split tags")?
        .iter()
        .map(|&b| SplitTag::from_u8(b).ok_or_else(|| Error::Data(format!("invalid split tag {b}"))))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(FormatError::Trailing(r.remaining()).into());
    }
    Dataset::new(t_in, x, y)?.with_split(tags)
}

pub fn save_cache(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_cache(ds))?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    decode_cache(&fs::read(path)?)
}

pub fn is_cache_file(path: &Path) -> Result<bool> {
    let mut head = [0u8; 8];
    let mut file = fs::File::open(path)?;
    let mut filled = 0;
    while filled < head.len() {
        match file.read(&mut head[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled == 8 && &head == DATASET_MAGIC)
}
