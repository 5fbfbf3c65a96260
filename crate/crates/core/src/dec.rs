//! Discrimination-enhanced classifier.
//!
//! Class text embeddings are scored channel by channel: `S` is the mean
//! product between different classes (how much classes agree on a channel),
//! `V` the population variance across classes, and `O = -lambda*S +
//! (1-lambda)*V`. The `k` channels with largest `O` form the refined
//! classifier.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, l2_normalize, l2_normalize_rows, EmbeddingMatrix};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.7;
pub const DEFAULT_K: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScore {
    pub similarity: Vec<f64>,
    pub variance: Vec<f64>,
    pub objective: Vec<f64>,
    pub lambda: f64,
}

impl ChannelScore {
    pub fn dim(&self) -> usize {
        self.objective.len()
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::BadLambda(lambda))
    }
}

/// Scores every channel of `embeddings` (rows = classes).
///
/// Rows are L2-normalized first unless the matrix is already flagged as
/// normalized.
pub fn score_channels(embeddings: &EmbeddingMatrix, lambda: f64) -> Result<ChannelScore> {
    check_lambda(lambda)?;
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::TooFewClasses(n));
    }
    let x = embeddings.normalized()?;
    let d = x.cols();
    let nf = n as f64;

    let mut sum = alloc::vec![0.0; d];
    let mut sum_sq = alloc::vec![0.0; d];
    for r in x.iter_rows() {
        for (c, &v) in r.iter().enumerate() {
            sum[c] += v;
            sum_sq[c] += v * v;
        }
    }

    let mut similarity = Vec::with_capacity(d);
    let mut variance = Vec::with_capacity(d);
    let mut objective = Vec::with_capacity(d);
    for c in 0..d {
        // sum over ordered pairs i != j of x_i x_j = (sum x)^2 - sum x^2
        let s = (sum[c] * sum[c] - sum_sq[c]) / (nf * (nf - 1.0));
        let mean = sum[c] / nf;
        let v = x.iter_rows().map(|r| (r[c] - mean) * (r[c] - mean)).sum::<f64>() / nf;
        similarity.push(s);
        variance.push(v);
        objective.push(-lambda * s + (1.0 - lambda) * v);
    }
    Ok(ChannelScore { similarity, variance, objective, lambda })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub k: usize,
    #[serde(rename = "source_D")]
    pub source_dim: usize,
    pub indices: Vec<usize>,
}

impl ChannelSelection {
    /// Validates a selection read from outside.
    pub fn validate(&self) -> Result<()> {
        if self.k != self.indices.len() || self.k == 0 || self.k > self.source_dim {
            return Err(Error::KOutOfRange { k: self.indices.len(), dim: self.source_dim });
        }
        let mut seen = alloc::vec![false; self.source_dim];
        for &i in &self.indices {
            if i >= self.source_dim {
                return Err(Error::DimMismatch { expected: self.source_dim, got: i + 1 });
            }
            if core::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateChannel(i));
            }
        }
        Ok(())
    }

    /// Picks the selected entries out of a full-dimension vector.
    pub fn slice(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.source_dim {
            return Err(Error::DimMismatch { expected: self.source_dim, got: v.len() });
        }
        Ok(self.indices.iter().map(|&i| v[i]).collect())
    }
}

/// Channel indices ordered by descending score, ties by ascending index.
pub(crate) fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn select_top_k(score: &ChannelScore, k: usize) -> Result<ChannelSelection> {
    let d = score.dim();
    if k == 0 || k > d {
        return Err(Error::KOutOfRange { k, dim: d });
    }
    let mut indices = rank_descending(&score.objective);
    indices.truncate(k);
    Ok(ChannelSelection { k, source_dim: d, indices })
}

/// Cosine classifier over class embeddings, optionally restricted to a
/// channel subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: EmbeddingMatrix,
    class_names: Vec<String>,
    selection: Option<ChannelSelection>,
}

impl Classifier {
    /// Classifier over all channels.
    pub fn naive(embeddings: &EmbeddingMatrix, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != embeddings.rows() {
            return Err(Error::ClassNameCount { classes: embeddings.rows(), names: class_names.len() });
        }
        let weights = l2_normalize_rows(embeddings)?;
        Ok(Self { weights, class_names, selection: None })
    }

    /// Rebuilds a classifier from stored weights (rows are re-normalized).
    pub fn from_parts(
        weights: &EmbeddingMatrix,
        class_names: Vec<String>,
        selection: Option<ChannelSelection>,
    ) -> Result<Self> {
        if let Some(sel) = &selection {
            sel.validate()?;
            if sel.k != weights.cols() {
                return Err(Error::DimMismatch { expected: sel.k, got: weights.cols() });
            }
        }
        let mut c = Self::naive(weights, class_names)?;
        c.selection = selection;
        Ok(c)
    }

    pub fn weights(&self) -> &EmbeddingMatrix {
        &self.weights
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn selection(&self) -> Option<&ChannelSelection> {
        self.selection.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    /// Dimension of the queries accepted by [`Classifier::classify_full`].
    pub fn source_dim(&self) -> usize {
        self.selection.as_ref().map_or(self.weights.cols(), |s| s.source_dim)
    }

    /// Cosine score per class for a query already in the classifier's
    /// column space (length = column count).
    pub fn classify(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.weights.cols() {
            return Err(Error::DimMismatch { expected: self.weights.cols(), got: query.len() });
        }
        let q = l2_normalize(query)?;
        Ok(self.weights.iter_rows().map(|w| dot(w, &q)).collect())
    }

    /// Cosine score per class for a full-dimension query; the query is
    /// sliced to the selected channels first when a selection is present.
    pub fn classify_full(&self, query: &[f64]) -> Result<Vec<f64>> {
        match &self.selection {
            Some(sel) => self.classify(&sel.slice(query)?),
            None => self.classify(query),
        }
    }
}

/// Slices `embeddings` to the selected channels and re-normalizes each row.
pub fn build_refined_classifier(
    embeddings: &EmbeddingMatrix,
    selection: &ChannelSelection,
    class_names: Vec<String>,
) -> Result<Classifier> {
    if selection.source_dim != embeddings.cols() {
        return Err(Error::DimMismatch { expected: embeddings.cols(), got: selection.source_dim });
    }
    selection.validate()?;
    let sliced = embeddings.select_columns(&selection.indices)?;
    let mut c = Classifier::naive(&sliced, class_names)?;
    c.selection = Some(selection.clone());
    Ok(c)
}

/// Averages per-template class embeddings: each template's rows are
/// normalized, averaged per class, and the mean re-normalized.
pub fn average_prompt_templates(per_template: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = per_template.first().ok_or(Error::EmptyTemplateList)?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut acc = alloc::vec![0.0; rows * cols];
    for m in per_template {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::ShapeMismatch { expected: rows * cols, got: m.rows() * m.cols() });
        }
        let n = l2_normalize_rows(m)?;
        for (a, v) in acc.iter_mut().zip(n.data()) {
            *a += v;
        }
    }
    let t = per_template.len() as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    let mut mean = EmbeddingMatrix::new(rows, cols, acc)?;
    if let Some(labels) = first.labels() {
        mean = mean.with_labels(labels.to_vec())?;
    }
    l2_normalize_rows(&mean)
}
