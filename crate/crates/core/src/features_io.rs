//! Binary tensor container and clip manifest written by `extract`.
//! The byte layout is described in `docs/feature-format.md`.

use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::checkpoint::write_atomic;
use crate::error::{M2dError, Result};

pub const MAGIC: &[u8; 8] = b"M2DFEAT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

pub fn encode_tensor(t: &ArrayD<f64>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.iter() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f64>> {
    let bad = |r: &str| M2dError::Data(format!("feature file: {r}"));
    let u32_at = |i: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(
            bytes.get(i..i + 4).ok_or_else(|| bad("truncated header"))?.try_into().expect("4"),
        ))
    };
    if bytes.get(..8) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    if u32_at(8)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let width = match u32_at(12)? {
        1 => 4,
        2 => 8,
        _ => return Err(bad("unknown dtype")),
    };
    let ndim = u32_at(16)? as usize;
    let mut pos = 20;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated shape"))?;
        shape.push(u64::from_le_bytes(d.try_into().expect("8")) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != n * width {
        return Err(bad("payload size does not match shape"));
    }
    let vals = payload
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_bytes(c.try_into().expect("4")) as f64
            } else {
                f64::from_le_bytes(c.try_into().expect("8"))
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), vals).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor(path: &Path, t: &ArrayD<f64>, dtype: DType) -> Result<()> {
    write_atomic(path, &encode_tensor(t, dtype))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    decode_tensor(&std::fs::read(path).map_err(|e| M2dError::io(path, e))?)
}

/// One manifest line: the clip's first row in the frame tensor and its row count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub offset: usize,
    pub rows: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# clip_id\toffset\trows").expect("vec write");
    for e in entries {
        writeln!(buf, "{}\t{}\t{}", e.clip_id, e.offset, e.rows).expect("vec write");
    }
    write_atomic(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| M2dError::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [id, off, rows] => Ok(ManifestEntry {
                    clip_id: id.to_string(),
                    offset: off.parse().map_err(|_| M2dError::Data(format!("bad offset in `{l}`")))?,
                    rows: rows.parse().map_err(|_| M2dError::Data(format!("bad row count in `{l}`")))?,
                }),
                _ => Err(M2dError::Data(format!("bad manifest line `{l}`"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let t = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f64 * 0.5);
        let bytes = encode_tensor(&t, DType::F64);
        assert_eq!(bytes.len(), 20 + 16 + 48);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        assert_eq!(decode_tensor(&encode_tensor(&t, DType::F32)).unwrap(), t);
        assert!(decode_tensor(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let e = vec![
            ManifestEntry { clip_id: "a".into(), offset: 0, rows: 12 },
            ManifestEntry { clip_id: "b".into(), offset: 12, rows: 24 },
        ];
        write_manifest(&p, &e).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), e);
    }
}
