//! Float checkpoint container.
//!
//! Layout (little-endian): magic `PFCK`, u16 version, u8 kind, u32 epoch,
//! u64 seed, u64 config hash, u32 tensor count, then per tensor: u16 name
//! length, name, u8 rank, u32 dims, f32 payload. A CRC32 of everything
//! before it closes the file.

use std::path::Path;

use super::{build_graph, Model, ModelKind, TrainMeta};
use crate::error::{Error, Result};
use crate::kitti_io::write_file;

pub const CKPT_MAGIC: &[u8; 4] = b"PFCK";
pub const CKPT_VERSION: u16 = 1;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.path, format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        dims.iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("tensor dims {dims:?} overflow the file")))?;
        Ok(dims)
    }

    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Splits off and verifies the CRC32 trailer.
pub(crate) fn checked_body<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "file too short for checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::format(path, "checksum mismatch"));
    }
    Ok(body)
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub(crate) fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub(crate) fn put_header(out: &mut Vec<u8>, kind_code: u8, meta: &TrainMeta, count: usize) {
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.push(kind_code);
    out.extend_from_slice(&meta.epoch.to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.config_hash.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub(crate) fn read_header(r: &mut Reader) -> Result<(u8, TrainMeta, usize)> {
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::format(r.path, "bad magic (expected PFCK)"));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::format(r.path, format!("unsupported checkpoint version {version}")));
    }
    let code = r.u8()?;
    let meta = TrainMeta {
        epoch: r.u32()?,
        seed: r.u64()?,
        config_hash: r.u64()?,
    };
    let count = r.u32()? as usize;
    Ok((code, meta, count))
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, model.kind.code(), &model.meta, model.graph.params.len());
    for p in &model.graph.params {
        put_name(&mut out, &p.name);
        put_dims(&mut out, &p.shape);
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    let body = checked_body(bytes, path)?;
    let mut r = Reader::new(body, path);
    let (code, meta, count) = read_header(&mut r)?;
    let kind = match ModelKind::from_code(code) {
        Some(k) => k,
        None if code & 0x80 != 0 => {
            return Err(Error::format(path, "quantized checkpoint where a float checkpoint was expected"))
        }
        None => return Err(Error::format(path, format!("unknown model kind byte {code}"))),
    };
    let mut graph = build_graph(kind, 0)?;
    if count != graph.params.len() {
        return Err(Error::format(
            path,
            format!("{kind} checkpoint holds {count} tensors, model has {}", graph.params.len()),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name = r.name()?;
        let dims = r.dims()?;
        let idx = graph
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::format(path, format!("unexpected tensor `{name}` for {kind} model")))?;
        let p = &mut graph.params[idx];
        if dims != p.shape || seen[idx] {
            return Err(Error::format(
                path,
                format!("tensor `{name}` has dims {dims:?}, expected {:?} once", p.shape),
            ));
        }
        seen[idx] = true;
        for v in p.value.iter_mut() {
            *v = r.f32()?;
        }
    }
    if !r.finished() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(Model { kind, graph, meta })
}

pub fn write_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(model))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let mut m = Model::build(ModelKind::Lidar, 5).unwrap();
        m.meta.epoch = 12;
        m.meta.config_hash = 0xdead_beef;
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.param_count(), m.param_count());
    }

    #[test]
    fn corrupt_crc_rejected() {
        let m = Model::build(ModelKind::Lidar, 5).unwrap();
        let mut bytes = encode_checkpoint(&m);
        bytes[40] ^= 1;
        let err = decode_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        assert_eq!(err.exit_code(), 2);
    }
}
