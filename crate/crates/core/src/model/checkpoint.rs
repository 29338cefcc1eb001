//! SLCK checkpoint container.
//!
//! Layout: `"SLCK"` | u32 version | u8 stage | u32 entry count | entries |
//! u32 CRC32 of everything before it. Each entry is a u32 name length, the
//! UTF-8 name, u32 rank, `rank` u32 dims and the f64 payload, all
//! little-endian. The configuration snapshot rides along as a rank-1 entry
//! named `__config__` holding the bytes of its `key = value` text.

use std::fs;
use std::path::Path;

use super::ParamStore;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SLCK_MAGIC: &[u8; 4] = b"SLCK";
pub const SLCK_VERSION: u32 = 1;
const CONFIG_ENTRY: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub stage: Stage,
    pub params: ParamStore,
    pub config: KeyValues,
}

impl ModelCheckpoint {
    pub fn new(stage: Stage, params: ParamStore, config: KeyValues) -> Self {
        ModelCheckpoint { stage, params, config }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let config_text = self.config.to_text();
        let config_tensor = Tensor::vector(config_text.bytes().map(f64::from).collect());
        if self.params.contains_key(CONFIG_ENTRY) {
            return Err(Error::InvalidArgument(format!("parameter name '{CONFIG_ENTRY}' is reserved")));
        }
        let entries = self
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once((CONFIG_ENTRY, &config_tensor)));

        let mut out = Vec::new();
        out.extend_from_slice(SLCK_MAGIC);
        out.extend_from_slice(&SLCK_VERSION.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&(self.params.len() as u32 + 1).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        if bytes.len() < 17 {
            return Err(Error::Truncated { path: path.to_path_buf(), expected: 17, found: bytes.len() as u64 });
        }
        if &bytes[..4] != SLCK_MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[..4])));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut r = Reader { buf: body, pos: 4, path };
        let version = r.u32()?;
        if version != SLCK_VERSION {
            return Err(format(format!("unsupported version {version}")));
        }
        if stored != computed {
            return Err(Error::Corrupt { path: path.to_path_buf(), stored, computed });
        }
        let stage_code = r.take(1)?[0];
        let stage = Stage::from_code(stage_code).ok_or_else(|| format(format!("unknown stage {stage_code}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut config = None;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == CONFIG_ENTRY {
                let text: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
                let text = String::from_utf8(text).map_err(|_| format("config snapshot is not UTF-8".into()))?;
                config = Some(KeyValues::parse(&text)?);
            } else if params.insert(name.clone(), t).is_some() {
                return Err(format(format!("duplicate entry '{name}'")));
            }
        }
        if r.pos != body.len() {
            return Err(format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ModelCheckpoint { stage, params, config: config.unwrap_or_default() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// CRC32 of the encoded checkpoint; equal fingerprints mean identical files.
    pub fn fingerprint(&self) -> Result<u32> {
        let bytes = self.encode()?;
        Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            expected: self.pos.saturating_add(n) as u64 + 4,
            found: self.buf.len() as u64 + 4,
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
