//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "M2DCKPT\0"
//! version  u32
//! config   u64 length + UTF-8 JSON snapshot of the run config
//! step     u64
//! adam_t   u64
//! count    u32 number of tensors
//! tensor   u32 name length, UTF-8 name, u64 rows, u64 cols, rows*cols f64
//! ...
//! sha256   32 bytes over everything above
//! ```
//!
//! Tensor names carry a group prefix: `online/`, `target/`, `mapper/`,
//! `adam_m/`, `adam_v/`.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{M2dError, Result};
use crate::networks::{OnlineState, TargetState};
use crate::nn::optim::AdamW;
use crate::nn::{Mat, ParamStore};

pub const MAGIC: &[u8; 8] = b"M2DCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Snapshot text kept verbatim so re-saving is byte-identical.
    pub config_snapshot: String,
    pub step: u64,
    pub online: OnlineState,
    pub target: TargetState,
    pub mapper: Option<ParamStore>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_snapshot(&self.config_snapshot)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let empty = IndexMap::new();
        let mapper = self.mapper.as_ref().map_or(&empty, |m| m.as_map());
        let groups: [(&str, &IndexMap<String, Mat>); 5] = [
            ("online", self.online.params.as_map()),
            ("target", self.target.params.as_map()),
            ("mapper", mapper),
            ("adam_m", &self.optimizer.m),
            ("adam_v", &self.optimizer.v),
        ];
        let tensors: Vec<(String, &Mat)> = groups
            .iter()
            .flat_map(|(g, items)| items.iter().map(move |(n, m)| (format!("{g}/{n}"), m)))
            .collect();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_snapshot.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_snapshot.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.optimizer.t.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, m) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| M2dError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic or too short)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(M2dError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let cfg_len = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let snapshot = r
            .take(cfg_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| corrupt("bad config snapshot"))?
            .to_string();
        let step = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let adam_t = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let count = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        let mut groups: IndexMap<String, ParamStore> = IndexMap::new();
        for _ in 0..count {
            let (group, name, m) = r.tensor().ok_or_else(|| corrupt("truncated tensor"))?;
            groups.entry(group).or_default().insert(name, m);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let cfg = RunConfig::from_snapshot(&snapshot).map_err(|_| corrupt("config snapshot does not parse"))?;
        let mut take = |g: &str| groups.shift_remove(g).unwrap_or_default();
        let (online_p, target_p, m, v) = (take("online"), take("target"), take("adam_m"), take("adam_v"));
        let online = OnlineState {
            encoder: cfg.encoder,
            predictor: cfg.predictor,
            params: online_p,
        };
        let target = TargetState {
            encoder: cfg.encoder,
            params: target_p,
        };
        let mapper = groups.shift_remove("mapper");
        let mut optimizer = AdamW::new(&cfg.optimizer);
        optimizer.t = adam_t;
        optimizer.m = m.into_map();
        optimizer.v = v.into_map();
        if let Some((g, _)) = groups.first() {
            return Err(corrupt(&format!("unknown tensor group `{g}`")));
        }
        // shapes must match what the config describes
        let fresh = OnlineState::init(cfg.encoder, cfg.predictor, &mut crate::rng::fork(0, crate::rng::Stream::Init, 0))?;
        online
            .params
            .check_same_layout(&fresh.params)
            .map_err(|e| corrupt(&format!("online parameters: {e}")))?;
        target
            .params
            .check_same_layout(&fresh.encoder_params())
            .map_err(|e| corrupt(&format!("target parameters: {e}")))?;
        Ok(Self {
            config_snapshot: snapshot,
            step,
            online,
            target,
            mapper,
            optimizer,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| M2dError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, String, Mat)> {
        let n = self.u32()? as usize;
        let full = std::str::from_utf8(self.take(n)?).ok()?;
        let (group, name) = full.split_once('/')?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let data = self.take(rows.checked_mul(cols)?.checked_mul(8)?)?;
        let vals = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some((group.to_string(), name.to_string(), Mat::from_shape_vec((rows, cols), vals).ok()?))
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| M2dError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| M2dError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| M2dError::io(&tmp, e))?;
    f.sync_all().map_err(|e| M2dError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| M2dError::io(path, e))
}
