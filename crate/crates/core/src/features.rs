//! The `.dyfh` per-clip hidden-state format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `DYFH` |
//! | 2 | version (`1`) |
//! | 2 | flags (`0`) |
//! | 4 | L |
//! | 4 | T |
//! | 4 | D |
//! | 4 | clip_id length |
//! | 8 | payload length in bytes (`4·L·T·D`) |
//! | n | clip_id, UTF-8 |
//! | 4·L·T·D | values, f32, `[layer][time][dim]` |

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DYFH";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const EXTENSION: &str = "dyfh";

/// Hidden states of one clip as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub clip_id: String,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureFile {
    pub fn new(
        clip_id: impl Into<String>,
        layers: usize,
        frames: usize,
        dim: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let file = Self {
            clip_id: clip_id.into(),
            layers,
            frames,
            dim,
            values,
        };
        file.check()?;
        Ok(file)
    }

    /// Narrows an `L×T×D` tensor to f32. Values that are not finite after
    /// narrowing are refused.
    pub fn from_tensor(clip_id: impl Into<String>, tensor: &Tensor) -> Result<Self> {
        let (l, t, d) = tensor.dims3()?;
        let values = tensor.data().iter().map(|&v| v as f32).collect();
        Self::new(clip_id, l, t, d, values)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(vec![self.layers, self.frames, self.dim], &self.values)
            .expect("shape checked on construction")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.layers, self.frames, self.dim]
    }

    pub fn payload_len(&self) -> usize {
        4 * self.values.len()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.clip_id.len() + self.payload_len()
    }

    fn check(&self) -> Result<()> {
        if self.clip_id.is_empty() {
            return Err(Error::format("clip_id", "empty"));
        }
        for (field, v) in [("L", self.layers), ("T", self.frames), ("D", self.dim)] {
            if v == 0 || u32::try_from(v).is_err() {
                return Err(Error::format(field, format!("{v} is not a positive u32")));
            }
        }
        let expected = self.layers * self.frames * self.dim;
        if self.values.len() != expected {
            return Err(Error::format(
                "payload length",
                format!("{} values for shape {:?}", self.values.len(), self.shape()),
            ));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format("payload", format!("non-finite value at index {i}")));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in [self.layers, self.frames, self.dim, self.clip_id.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.payload_len() as u64).to_le_bytes());
        out.extend_from_slice(self.clip_id.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take("magic", 4)? != MAGIC {
            return Err(Error::format("magic", "bad magic"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let flags = r.u16("flags")?;
        if flags != 0 {
            return Err(Error::format("flags", format!("unknown flags {flags:#06x}")));
        }
        let layers = r.u32("L")? as usize;
        let frames = r.u32("T")? as usize;
        let dim = r.u32("D")? as usize;
        let id_len = r.u32("clip_id length")? as usize;
        let payload_len = r.u64("payload length")?;
        for (field, v) in [("L", layers), ("T", frames), ("D", dim), ("clip_id length", id_len)] {
            if v == 0 {
                return Err(Error::format(field, "must be positive"));
            }
        }
        let expected = (layers as u64)
            .checked_mul(frames as u64)
            .and_then(|n| n.checked_mul(dim as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("payload length", "shape overflows"))?;
        if payload_len != expected {
            return Err(Error::format(
                "payload length",
                format!("header declares {payload_len} bytes, shape {layers}x{frames}x{dim} needs {expected}"),
            ));
        }
        let clip_id = std::str::from_utf8(r.take("clip_id", id_len)?)
            .map_err(|e| Error::format("clip_id", e.to_string()))?
            .to_string();
        let remaining = (bytes.len() - r.pos) as u64;
        if remaining != payload_len {
            return Err(Error::format(
                "payload length",
                format!("expected {payload_len} bytes, found {remaining}"),
            ));
        }
        let values = bytes[r.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Self::new(clip_id, layers, frames, dim, values)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(field, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }
}

/// `<dir>/<clip_id>.dyfh`.
pub fn feature_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.{EXTENSION}"))
}

fn check_clip_id(clip_id: &str) -> Result<()> {
    if clip_id.is_empty() || clip_id.contains(['/', '\\']) || clip_id == "." || clip_id == ".." {
        return Err(Error::Data(format!("clip id `{clip_id}` cannot name a feature file")));
    }
    Ok(())
}

/// Writes `tensor` (L×T×D) as `<dir>/<clip_id>.dyfh` and returns the path.
pub fn write_features(dir: &Path, clip_id: &str, tensor: &Tensor) -> Result<PathBuf> {
    check_clip_id(clip_id)?;
    let file = FeatureFile::from_tensor(clip_id, tensor)?;
    let path = feature_path(dir, clip_id);
    write_atomic(&path, &file.encode())?;
    Ok(path)
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureFile::decode(&bytes)
}

/// Clip ids whose feature file is absent from `dir`.
pub fn missing_features<'a>(dir: &Path, clip_ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    clip_ids
        .into_iter()
        .filter(|id| !feature_path(dir, id).is_file())
        .map(str::to_string)
        .collect()
}

/// Loads feature files on demand and keeps decoded tensors in memory until
/// `budget_bytes` (counted at 8 bytes per value) is used up.
#[derive(Debug)]
pub struct FeatureStore {
    dir: PathBuf,
    budget_bytes: usize,
    used_bytes: usize,
    cache: HashMap<String, Arc<Tensor>>,
}

impl FeatureStore {
    pub const DEFAULT_BUDGET: usize = 2 << 30;

    pub fn new(dir: impl Into<PathBuf>, budget_bytes: usize) -> Self {
        Self {
            dir: dir.into(),
            budget_bytes,
            used_bytes: 0,
            cache: HashMap::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Fails with [`Error::MissingFeatures`] naming every absent clip.
    pub fn require<'a>(&self, clip_ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing = missing_features(&self.dir, clip_ids);
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFeatures(missing))
        }
    }

    pub fn get(&mut self, clip_id: &str) -> Result<Arc<Tensor>> {
        if let Some(t) = self.cache.get(clip_id) {
            return Ok(Arc::clone(t));
        }
        let path = feature_path(&self.dir, clip_id);
        if !path.is_file() {
            return Err(Error::MissingFeatures(vec![clip_id.to_string()]));
        }
        let file = read_features(&path)?;
        if file.clip_id != clip_id {
            return Err(Error::format(
                "clip_id",
                format!("{} holds clip `{}`", path.display(), file.clip_id),
            ));
        }
        let tensor = Arc::new(file.to_tensor());
        let size = 8 * tensor.len();
        if self.used_bytes + size <= self.budget_bytes {
            self.used_bytes += size;
            self.cache.insert(clip_id.to_string(), Arc::clone(&tensor));
        }
        Ok(tensor)
    }
}
