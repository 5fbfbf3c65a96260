//! Dense tensor primitives shared by every other module.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Row norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Tolerance used when checking that a matrix is row-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Row-major `rows x cols` matrix of per-class or per-instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    labels: Option<Vec<String>>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch { expected: rows * cols, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data, labels: None, normalized: false })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch { expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.rows {
            return Err(Error::LabelCount { rows: self.rows, labels: labels.len() });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// True when produced by [`l2_normalize_rows`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Checks every row norm against 1 within `tol`.
    pub fn rows_unit_norm(&self, tol: f64) -> bool {
        self.iter_rows().all(|r| (norm(r) - 1.0).abs() <= tol)
    }

    /// Returns the normalized matrix, reusing `self` when already normalized.
    pub fn normalized(&self) -> Result<Self> {
        if self.normalized {
            Ok(self.clone())
        } else {
            l2_normalize_rows(self)
        }
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.cols) {
            return Err(Error::DimMismatch { expected: self.cols, got: bad + 1 });
        }
        let mut data = Vec::with_capacity(self.rows * columns.len());
        for r in self.iter_rows() {
            data.extend(columns.iter().map(|&c| r[c]));
        }
        let mut out = Self::new(self.rows, columns.len(), data)?;
        out.labels = self.labels.clone();
        Ok(out)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Unit-normalizes a single vector.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroNormRow(0));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Divides each row by its L2 norm and marks the result normalized.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, r) in m.iter_rows().enumerate() {
        let n = norm(r);
        if n < ZERO_NORM {
            return Err(Error::ZeroNormRow(i));
        }
        data.extend(r.iter().map(|x| x / n));
    }
    Ok(EmbeddingMatrix {
        rows: m.rows,
        cols: m.cols,
        data,
        labels: m.labels.clone(),
        normalized: true,
    })
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::DimMismatch { expected: 1, got: 0 });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `channels x height x width` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::EmptyShape { rows: channels, cols: height * width });
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `height x width` boolean grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch { expected: height * width, got: bits.len() });
        }
        Ok(Self { height, width, bits })
    }

    /// Sets the pixels `(y, x)` listed in `points`.
    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(y, x) in points {
            m.set(y, x, true);
        }
        m
    }

    /// Axis-aligned rectangle clipped to the grid.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut m = Self::empty(height, width);
        for y in top..(top + h).min(height) {
            for x in left..(left + w).min(width) {
                m.set(y, x, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Run-length counts in row-major order, starting with a background run
    /// (which may be zero).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<Self> {
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if total != height * width {
            return Err(Error::ShapeMismatch { expected: height * width, got: total });
        }
        let mut bits = Vec::with_capacity(total);
        let mut value = false;
        for &c in counts {
            bits.extend(core::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(Self { height, width, bits })
    }
}

/// Per-channel mean of `fm` over the set pixels of `mask`.
pub fn mask_pool(fm: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    if mask.height != fm.height {
        return Err(Error::DimMismatch { expected: fm.height, got: mask.height });
    }
    if mask.width != fm.width {
        return Err(Error::DimMismatch { expected: fm.width, got: mask.width });
    }
    let idx: Vec<usize> = mask
        .bits
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = idx.len() as f64;
    Ok((0..fm.channels)
        .map(|c| {
            let plane = fm.plane(c);
            idx.iter().map(|&i| plane[i]).sum::<f64>() / n
        })
        .collect())
}
