//! Binary checkpoint format: an ordered list of named arrays.
//!
//! Per entry: name length (u32 LE), name bytes (UTF-8), rank (u32 LE),
//! dims (u32 LE each), then the values as little-endian f64.

use super::array::Array;
use super::{AutodiffError, Result};

pub fn write_checkpoint(entries: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, array) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(array.shape().len() as u32).to_le_bytes());
        for &d in array.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in array.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AutodiffError::Checkpoint("truncated checkpoint".to_string()))?;
        let slice = &bytes[*pos..end];
        *pos = end;
        Ok(slice)
    };
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };

    while pos < bytes.len() {
        let name_len = take_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("name is not UTF-8".to_string()))?;
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let b = take(&mut pos, 8)?;
            data.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        entries.push((name, Array::new(shape, data).map_err(|e| {
            AutodiffError::Checkpoint(e.to_string())
        })?));
    }
    Ok(entries)
}
