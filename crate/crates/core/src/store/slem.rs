//! The SLEM embedding container.
//!
//! ```text
//! "SLEM" | u32 version | u8 subspace | u32 K | u32 F | u32 T | K·F·T f32 | u32 crc32(payload)
//! ```
//!
//! All integers and floats are little-endian; the payload is laid out in
//! (layer, feature, time) order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SLEM_MAGIC: &[u8; 4] = b"SLEM";
pub const SLEM_VERSION: u32 = 1;
/// Bytes before the payload.
pub const SLEM_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subspace {
    Style,
    Linguistics,
}

impl Subspace {
    pub fn code(self) -> u8 {
        match self {
            Subspace::Style => 0,
            Subspace::Linguistics => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Subspace::Style),
            1 => Some(Subspace::Linguistics),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subspace::Style => "style",
            Subspace::Linguistics => "linguistics",
        }
    }
}

/// A `K×F×T` (layers × features × time) subspace representation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor {
    subspace: Subspace,
    layers: usize,
    features: usize,
    frames: usize,
    data: Vec<f32>,
}

impl EmbeddingTensor {
    pub fn new(subspace: Subspace, layers: usize, features: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if layers == 0 || features == 0 || frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimensions must be positive, got K={layers} F={features} T={frames}"
            )));
        }
        if data.len() != layers * features * frames {
            return Err(Error::InvalidArgument(format!(
                "embedding K={layers} F={features} T={frames} needs {} values, got {}",
                layers * features * frames,
                data.len()
            )));
        }
        Ok(EmbeddingTensor {
            subspace,
            layers,
            features,
            frames,
            data,
        })
    }

    /// Stores a `K×F×T` tensor, narrowing to 32-bit floats.
    pub fn from_tensor(subspace: Subspace, t: &Tensor) -> Result<Self> {
        let (k, f, n) = t.dims3()?;
        Self::new(subspace, k, f, n, t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn subspace(&self) -> Subspace {
        self.subspace
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, layer: usize, feature: usize, frame: usize) -> f32 {
        self.data[(layer * self.features + feature) * self.frames + frame]
    }

    /// `K×F×T` tensor promoted to `f64`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.layers, self.features, self.frames],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("dimensions validated at construction")
    }

    /// Mean over layers, `F×T` in `f64`.
    pub fn pooled(&self) -> Tensor {
        let plane = self.features * self.frames;
        let mut out = vec![0.0f64; plane];
        for layer in self.data.chunks(plane) {
            for (o, &v) in out.iter_mut().zip(layer) {
                *o += f64::from(v);
            }
        }
        let inv = 1.0 / self.layers as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::new(vec![self.features, self.frames], out).expect("dimensions validated at construction")
    }

    /// Time average of one layer, an `F`-vector.
    pub fn layer_time_mean(&self, layer: usize) -> Vec<f64> {
        let plane = &self.data[layer * self.features * self.frames..(layer + 1) * self.features * self.frames];
        plane
            .chunks(self.frames)
            .map(|row| row.iter().map(|&v| f64::from(v)).sum::<f64>() / self.frames as f64)
            .collect()
    }
}

pub fn encode_embedding(t: &EmbeddingTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(SLEM_HEADER_LEN + 4 * t.data.len() + 4);
    out.extend_from_slice(SLEM_MAGIC);
    out.extend_from_slice(&SLEM_VERSION.to_le_bytes());
    out.push(t.subspace.code());
    for dim in [t.layers, t.features, t.frames] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[SLEM_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

/// Parses a SLEM buffer; `path` is only used for error messages.
pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<EmbeddingTensor> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != SLEM_MAGIC {
        return Err(format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
        )));
    }
    if bytes.len() < SLEM_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: SLEM_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != SLEM_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let subspace = Subspace::from_code(bytes[8]).ok_or_else(|| format(format!("unknown subspace code {}", bytes[8])))?;
    let (k, f, t) = (
        u32_at(bytes, 9) as usize,
        u32_at(bytes, 13) as usize,
        u32_at(bytes, 17) as usize,
    );
    if k == 0 || f == 0 || t == 0 {
        return Err(format(format!("zero dimension in header K={k} F={f} T={t}")));
    }
    let expected = (SLEM_HEADER_LEN as u64) + 4 * (k as u64) * (f as u64) * (t as u64) + 4;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let payload = &bytes[SLEM_HEADER_LEN..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    EmbeddingTensor::new(subspace, k, f, t, data)
}

pub fn write_embedding(t: &EmbeddingTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding(t)).map_err(|e| Error::io(path, e))
}

pub fn read_embedding(path: impl AsRef<Path>) -> Result<EmbeddingTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path)
}
