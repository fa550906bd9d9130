//! Binary feature-grid files.
//!
//! Layout, all little-endian: magic `MRGF`, then u32 version, record count,
//! h, w, c, patch size; each record is a u16 id length, the UTF-8 id and
//! `h·w·c` f32 values in (row, col, channel) order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::clustering::FeatureGrid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MRGF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

pub fn encode_features(grids: &[FeatureGrid]) -> Result<Vec<u8>> {
    let (h, w, c, patch) = match grids.first() {
        Some(g) => (g.h, g.w, g.c, g.patch_size),
        None => (0, 0, 0, 0),
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(HEADER_LEN + grids.len() * (h * w * c * 4 + 16));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        to_u32(grids.len())?,
        to_u32(h)?,
        to_u32(w)?,
        to_u32(c)?,
        to_u32(patch)?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in grids {
        if (g.h, g.w, g.c, g.patch_size) != (h, w, c, patch) {
            return Err(Error::shape(format!(
                "record {:?} is {}x{}x{} (patch {}), file is {h}x{w}x{c} (patch {patch})",
                g.image_id, g.h, g.w, g.c, g.patch_size
            )));
        }
        if !seen.insert(g.image_id.as_str()) {
            return Err(Error::DuplicateId(g.image_id.clone()));
        }
        let id = g.image_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::invalid(format!("image_id of {} bytes is too long", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        for v in &g.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the u32 header field")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureGrid>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let count = cur.u32("record count")? as usize;
    let h = cur.u32("grid height")? as usize;
    let w = cur.u32("grid width")? as usize;
    let c = cur.u32("channel count")? as usize;
    let patch = cur.u32("patch size")? as usize;
    let values = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Malformed(format!("grid {h}x{w}x{c} overflows")))?;

    let mut seen = BTreeSet::new();
    let mut grids = Vec::with_capacity(count.min(bytes.len() / 2));
    for r in 0..count {
        let len = cur.u16(&format!("id length of record {r} of {count}"))? as usize;
        let id = std::str::from_utf8(cur.take(len, &format!("id of record {r}"))?)
            .map_err(|e| Error::Malformed(format!("record {r} id is not UTF-8: {e}")))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let payload = cur.take(values * 4, &format!("values of record {r} ({id:?})"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        grids.push(FeatureGrid::new(id, h, w, c, patch, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - cur.pos
        )));
    }
    Ok(grids)
}

pub fn write_features(path: &Path, grids: &[FeatureGrid]) -> Result<()> {
    let bytes = encode_features(grids)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureGrid>> {
    decode_features(&fs::read(path)?)
}
