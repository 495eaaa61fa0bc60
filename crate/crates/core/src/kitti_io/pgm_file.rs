//! `PGMF` container for polar grid frames.
//!
//! ```text
//! "PGMF" | u16 version=1 | u32 H | u32 W | u32 C | u32 flags
//! payload: H*W*C f32 | H*W u8 mask | H*W u32 labels
//!          [flags&1: H*W u32 point index] [flags&2: H*W*3 f32 image grid]
//! u32 CRC32(payload)
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PgmFrame;

const MAGIC: &[u8; 4] = b"PGMF";
const VERSION: u16 = 1;
pub const PGM_HEADER_BYTES: usize = 22;
const FLAG_POINT_INDEX: u32 = 1;
const FLAG_IMAGE: u32 = 2;

pub fn encode_pgm(frame: &PgmFrame) -> Result<Vec<u8>> {
    frame.validate()?;
    let cells = frame.cells();
    let mut flags = 0;
    if frame.point_index.is_some() {
        flags |= FLAG_POINT_INDEX;
    }
    if frame.image.is_some() {
        flags |= FLAG_IMAGE;
    }
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::contract(format!("dimension {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(PGM_HEADER_BYTES + cells * (frame.c * 4 + 5) + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [dim(frame.h)?, dim(frame.w)?, dim(frame.c)?, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &frame.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(frame.mask.iter().map(|&m| m as u8));
    for v in &frame.labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(idx) = &frame.point_index {
        for v in idx {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(img) = &frame.image {
        for v in img {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[PGM_HEADER_BYTES..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<PgmFrame> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < PGM_HEADER_BYTES + 4 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic: not a PGMF file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(format!("unsupported PGMF version {version}")));
    }
    let (h, w, c, flags) = (
        u32_at(bytes, 6) as usize,
        u32_at(bytes, 10) as usize,
        u32_at(bytes, 14) as usize,
        u32_at(bytes, 18),
    );
    let overflow = || fail(format!("dimensions {h}x{w}x{c} overflow"));
    let cells = h.checked_mul(w).ok_or_else(overflow)?;
    let mut payload = cells
        .checked_mul(c)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(cells * 5))
        .ok_or_else(overflow)?;
    if flags & FLAG_POINT_INDEX != 0 {
        payload = payload.checked_add(cells * 4).ok_or_else(overflow)?;
    }
    if flags & FLAG_IMAGE != 0 {
        payload = payload.checked_add(cells * 12).ok_or_else(overflow)?;
    }
    if flags & !(FLAG_POINT_INDEX | FLAG_IMAGE) != 0 {
        return Err(fail(format!("unknown flags {flags:#x}")));
    }
    let expected = PGM_HEADER_BYTES
        .checked_add(payload)
        .and_then(|v| v.checked_add(4))
        .ok_or_else(overflow)?;
    if bytes.len() != expected {
        return Err(fail(format!(
            "file is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let body = &bytes[PGM_HEADER_BYTES..PGM_HEADER_BYTES + payload];
    let stored = u32_at(bytes, PGM_HEADER_BYTES + payload);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(fail(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }

    let mut off = 0;
    let take_f32 = |n: usize, off: &mut usize| -> Vec<f32> {
        let v = body[*off..*off + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *off += n * 4;
        v
    };
    let data = take_f32(cells * c, &mut off);
    let mask_bytes = &body[off..off + cells];
    off += cells;
    if mask_bytes.iter().any(|&m| m > 1) {
        return Err(fail("mask byte outside {0, 1}".into()));
    }
    let mask = mask_bytes.iter().map(|&m| m == 1).collect();
    let take_u32 = |n: usize, off: &mut usize| -> Vec<u32> {
        let v = body[*off..*off + n * 4]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *off += n * 4;
        v
    };
    let labels = take_u32(cells, &mut off);
    let point_index = (flags & FLAG_POINT_INDEX != 0).then(|| take_u32(cells, &mut off));
    let image = (flags & FLAG_IMAGE != 0).then(|| take_f32(cells * 3, &mut off));
    let frame = PgmFrame {
        h,
        w,
        c,
        data,
        mask,
        labels,
        point_index,
        image,
    };
    frame
        .validate()
        .map_err(|e| fail(format!("invalid frame contents: {e}")))?;
    Ok(frame)
}

pub fn write_pgm(frame: &PgmFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    super::write_file(path, &encode_pgm(frame)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<PgmFrame> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}
