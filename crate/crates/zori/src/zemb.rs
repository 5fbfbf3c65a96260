//! ZEMB binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ZEMB" | version u32 = 1 | dtype u32 = 0 (f32) | rank u32 | rank x u64 dims
//! | row-major f32 payload | [u64 length | UTF-8 JSON {"labels": [...]}]
//! ```
//!
//! The sidecar is optional; when present it labels the first axis.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zori_core::tensor::{EmbeddingMatrix, FeatureMap};

use crate::error::{FormatError, Result, ZoriError};

pub const MAGIC: &[u8; 4] = b"ZEMB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<String>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> std::result::Result<Self, FormatError> {
        let n = element_count(&dims).ok_or_else(|| FormatError::new(0, "dimension product overflows"))?;
        if n != data.len() {
            return Err(FormatError::new(0, format!("dims hold {n} elements, payload has {}", data.len())));
        }
        Ok(Self { dims, data, labels: None })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
            labels: m.labels().map(<[String]>::to_vec),
        }
    }

    pub fn from_feature_map(fm: &FeatureMap) -> Self {
        Self {
            dims: vec![fm.channels(), fm.height(), fm.width()],
            data: fm.data().iter().map(|&v| v as f32).collect(),
            labels: None,
        }
    }

    fn widened(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        let [rows, cols] = self.dims[..] else {
            return Err(ZoriError::Usage(format!("expected a rank-2 tensor, got rank {}", self.rank())));
        };
        let m = EmbeddingMatrix::new(rows, cols, self.widened())?;
        Ok(match &self.labels {
            Some(l) => m.with_labels(l.clone())?,
            None => m,
        })
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let [c, h, w] = self.dims[..] else {
            return Err(ZoriError::Usage(format!("expected a rank-3 tensor, got rank {}", self.rank())));
        };
        Ok(FeatureMap::new(c, h, w, self.widened())?)
    }

    /// Splits a rank-3 tensor into its rank-2 slices along the first axis.
    pub fn to_matrices(&self) -> Result<Vec<EmbeddingMatrix>> {
        let [n, rows, cols] = self.dims[..] else {
            return Err(ZoriError::Usage(format!("expected a rank-3 tensor, got rank {}", self.rank())));
        };
        let data = self.widened();
        (0..n)
            .map(|i| Ok(EmbeddingMatrix::new(rows, cols, data[i * rows * cols..(i + 1) * rows * cols].to_vec())?))
            .collect()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &t.labels {
        let json = serde_json::to_vec(&Sidecar { labels: labels.clone() }).expect("string list serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::new(self.pos as u64, format!("truncated {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(FormatError::new(0, "bad magic"));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::new(4, format!("unsupported version {version}")));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::new(8, format!("unsupported dtype {dtype}")));
    }
    let rank = cur.u32("rank")? as usize;
    if rank == 0 {
        return Err(FormatError::new(12, "rank must be at least 1"));
    }
    let mut dims = Vec::with_capacity(rank.min(16));
    for i in 0..rank {
        let at = cur.pos as u64;
        let d = cur.u64(&format!("dimension {i}"))?;
        dims.push(usize::try_from(d).map_err(|_| FormatError::new(at, "dimension too large"))?);
    }
    let payload_at = cur.pos as u64;
    let n = element_count(&dims)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| FormatError::new(payload_at, "dimension product overflows"))?;
    let payload = cur.take(n * 4, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::new(payload_at + 4 * i as u64, "non-finite value"));
    }

    let mut labels = None;
    if cur.pos < bytes.len() {
        let len_at = cur.pos as u64;
        let len = cur.u64("sidecar length")?;
        let len = usize::try_from(len).map_err(|_| FormatError::new(len_at, "sidecar too large"))?;
        let json_at = cur.pos as u64;
        let json = cur.take(len, "sidecar")?;
        let side: Sidecar =
            serde_json::from_slice(json).map_err(|e| FormatError::new(json_at, format!("bad sidecar: {e}")))?;
        if side.labels.len() != dims[0] {
            return Err(FormatError::new(
                json_at,
                format!("{} labels for {} rows", side.labels.len(), dims[0]),
            ));
        }
        if cur.pos != bytes.len() {
            return Err(FormatError::new(cur.pos as u64, "trailing bytes"));
        }
        labels = Some(side.labels);
    }
    Ok(Tensor { dims, data, labels })
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| ZoriError::io(path, e))?;
    decode(&bytes).map_err(|e| ZoriError::format(path, e))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| ZoriError::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    read(path)?.to_matrix()
}

pub fn write_matrix(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write(path, &Tensor::from_matrix(m))
}
