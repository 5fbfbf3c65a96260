//! Knowledge-maintained adaptation.
//!
//! Backbone channels are split with the same objective as the text
//! classifier: the highest-scoring channels stay frozen, the rest get a
//! per-channel affine adapter trained with masked gradients.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dec::{check_lambda, rank_descending, score_channels, Classifier};
use crate::tensor::{dot, norm, softmax, EmbeddingMatrix, FeatureMap, ZERO_NORM};
use crate::{Error, Result};

pub const DEFAULT_TRAINABLE: usize = 32;
pub const DEFAULT_INSTANCES_PER_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPartition {
    #[serde(rename = "source_D")]
    pub source_dim: usize,
    pub frozen: Vec<usize>,
    pub trainable: Vec<usize>,
}

impl ChannelPartition {
    /// Checks that `frozen` and `trainable` are sorted and together cover
    /// every channel exactly once.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.source_dim];
        for list in [&self.frozen, &self.trainable] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::BadCount { count: list.len(), dim: self.source_dim });
            }
            for &c in list {
                if c >= self.source_dim {
                    return Err(Error::DimMismatch { expected: self.source_dim, got: c + 1 });
                }
                if core::mem::replace(&mut seen[c], true) {
                    return Err(Error::DuplicateChannel(c));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::BadCount { count: self.frozen.len() + self.trainable.len(), dim: self.source_dim });
        }
        Ok(())
    }

    /// Per-channel frozen flags.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.source_dim];
        for &c in &self.frozen {
            mask[c] = true;
        }
        mask
    }
}

/// Per-class mean of the first `t` instance features, one row per class.
///
/// Each entry of `per_class` holds the instance features of one class.
pub fn class_means(per_class: &[Vec<Vec<f64>>], t: usize) -> Result<EmbeddingMatrix> {
    if t == 0 {
        return Err(Error::BadCount { count: 0, dim: 0 });
    }
    let dim = per_class
        .first()
        .and_then(|c| c.first())
        .map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(per_class.len());
    for (class, instances) in per_class.iter().enumerate() {
        if instances.len() < t {
            return Err(Error::InsufficientInstances { class, have: instances.len(), need: t });
        }
        let mut mean = vec![0.0; dim];
        for inst in &instances[..t] {
            if inst.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: inst.len() });
            }
            for (m, v) in mean.iter_mut().zip(inst) {
                *m += v / t as f64;
            }
        }
        rows.push(mean);
    }
    crate::tensor::l2_normalize_rows(&EmbeddingMatrix::from_rows(&rows)?)
}

/// Freezes the `D - n_trainable` highest-objective channels.
pub fn partition_channels(
    class_features: &EmbeddingMatrix,
    lambda: f64,
    n_trainable: usize,
) -> Result<ChannelPartition> {
    check_lambda(lambda)?;
    let d = class_features.cols();
    if n_trainable == 0 || n_trainable >= d {
        return Err(Error::BadCount { count: n_trainable, dim: d });
    }
    let score = score_channels(class_features, lambda)?;
    let order = rank_descending(&score.objective);
    let mut frozen = order[..d - n_trainable].to_vec();
    let mut trainable = order[d - n_trainable..].to_vec();
    frozen.sort_unstable();
    trainable.sort_unstable();
    Ok(ChannelPartition { source_dim: d, frozen, trainable })
}

/// Per-channel `scale * x + bias` whose frozen channels are pinned to the
/// identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAdapter {
    scale: Vec<f64>,
    bias: Vec<f64>,
    frozen: Vec<bool>,
    partition: ChannelPartition,
}

/// Loss and gradients for one batch; frozen entries of the gradients are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub loss: f64,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ChannelAdapter {
    pub fn new(partition: ChannelPartition) -> Result<Self> {
        partition.validate()?;
        let d = partition.source_dim;
        Ok(Self {
            scale: vec![1.0; d],
            bias: vec![0.0; d],
            frozen: partition.frozen_mask(),
            partition,
        })
    }

    /// Restores an adapter from its `2 x D` state (row 0 scale, row 1 bias).
    pub fn from_state(partition: ChannelPartition, state: &EmbeddingMatrix) -> Result<Self> {
        let mut a = Self::new(partition)?;
        if state.rows() != 2 || state.cols() != a.dim() {
            return Err(Error::ShapeMismatch { expected: 2 * a.dim(), got: state.rows() * state.cols() });
        }
        for c in 0..a.dim() {
            let (s, b) = (state.get(0, c), state.get(1, c));
            if a.frozen[c] {
                if s != 1.0 || b != 0.0 {
                    return Err(Error::FrozenChannel(c));
                }
            } else {
                a.scale[c] = s;
                a.bias[c] = b;
            }
        }
        Ok(a)
    }

    pub fn state(&self) -> EmbeddingMatrix {
        let mut data = self.scale.clone();
        data.extend_from_slice(&self.bias);
        EmbeddingMatrix::new(2, self.dim(), data).expect("adapter state is finite")
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn partition(&self) -> &ChannelPartition {
        &self.partition
    }

    pub fn is_frozen(&self, channel: usize) -> bool {
        self.frozen[channel]
    }

    /// Sets a trainable channel's parameters.
    pub fn set_channel(&mut self, channel: usize, scale: f64, bias: f64) -> Result<()> {
        if channel >= self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: channel + 1 });
        }
        if self.frozen[channel] {
            return Err(Error::FrozenChannel(channel));
        }
        if !scale.is_finite() || !bias.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        self.scale[channel] = scale;
        self.bias[channel] = bias;
        Ok(())
    }

    /// Applies the adapter to a single feature vector.
    pub fn apply_vector(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: features.len() });
        }
        Ok(features
            .iter()
            .enumerate()
            .map(|(c, &x)| if self.frozen[c] { x } else { self.scale[c] * x + self.bias[c] })
            .collect())
    }

    /// Frozen channels are copied verbatim so they stay bit-identical
    /// (including signed zeros).
    pub fn apply(&self, fm: &FeatureMap) -> Result<FeatureMap> {
        if fm.channels() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: fm.channels() });
        }
        let mut out = fm.clone();
        let hw = fm.height() * fm.width();
        for (c, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            if self.frozen[c] {
                continue;
            }
            let (s, b) = (self.scale[c], self.bias[c]);
            plane.iter_mut().for_each(|v| *v = s * *v + b);
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &[(Vec<f64>, usize)], classifier: &Classifier) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if classifier.source_dim() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: classifier.source_dim() });
        }
        for (x, y) in batch {
            if x.len() != self.dim() {
                return Err(Error::DimMismatch { expected: self.dim(), got: x.len() });
            }
            if *y >= classifier.num_classes() {
                return Err(Error::LabelOutOfRange { label: *y, classes: classifier.num_classes() });
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of softmax over the classifier's cosine scores of
    /// the adapted features.
    pub fn loss(&self, batch: &[(Vec<f64>, usize)], classifier: &Classifier) -> Result<f64> {
        self.check_batch(batch, classifier)?;
        let mut total = 0.0;
        for (x, y) in batch {
            let scores = classifier.classify_full(&self.apply_vector(x)?)?;
            total += -libm::log(softmax(&scores)?[*y]);
        }
        Ok(total / batch.len() as f64)
    }

    /// Analytic batch gradient with frozen entries zeroed.
    pub fn gradient(&self, batch: &[(Vec<f64>, usize)], classifier: &Classifier) -> Result<AdapterGradient> {
        self.check_batch(batch, classifier)?;
        let d = self.dim();
        let channels: Vec<usize> = match classifier.selection() {
            Some(sel) => sel.indices.clone(),
            None => (0..d).collect(),
        };
        let weights = classifier.weights();
        let mut grad_scale = vec![0.0; d];
        let mut grad_bias = vec![0.0; d];
        let mut total = 0.0;

        for (x, y) in batch {
            let z: Vec<f64> = channels
                .iter()
                .map(|&c| self.scale[c] * x[c] + self.bias[c])
                .collect();
            let zn = norm(&z);
            if zn < ZERO_NORM {
                return Err(Error::ZeroNormRow(0));
            }
            let u: Vec<f64> = z.iter().map(|v| v / zn).collect();
            let logits: Vec<f64> = weights.iter_rows().map(|w| dot(w, &u)).collect();
            let p = softmax(&logits)?;
            total += -libm::log(p[*y]);

            // dL/du = sum_c (p_c - [c == y]) w_c
            let mut g_u = vec![0.0; u.len()];
            for (c, w) in weights.iter_rows().enumerate() {
                let coef = p[c] - if c == *y { 1.0 } else { 0.0 };
                for (g, wv) in g_u.iter_mut().zip(w) {
                    *g += coef * wv;
                }
            }
            // through u = z / |z|: dL/dz = (g - (g.u) u) / |z|
            let gu_dot = dot(&g_u, &u);
            for (j, &c) in channels.iter().enumerate() {
                let g_z = (g_u[j] - gu_dot * u[j]) / zn;
                grad_scale[c] += g_z * x[c];
                grad_bias[c] += g_z;
            }
        }

        let n = batch.len() as f64;
        for c in 0..d {
            if self.frozen[c] {
                grad_scale[c] = 0.0;
                grad_bias[c] = 0.0;
            } else {
                grad_scale[c] /= n;
                grad_bias[c] /= n;
            }
        }
        Ok(AdapterGradient { loss: total / n, scale: grad_scale, bias: grad_bias })
    }

    /// One gradient-descent step; returns the loss before the update.
    pub fn step(&mut self, batch: &[(Vec<f64>, usize)], classifier: &Classifier, lr: f64) -> Result<f64> {
        if !lr.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        let g = self.gradient(batch, classifier)?;
        for c in 0..self.dim() {
            self.scale[c] -= lr * g.scale[c];
            self.bias[c] -= lr * g.bias[c];
        }
        Ok(g.loss)
    }
}

/// Functional form of [`ChannelAdapter::step`].
pub fn adapter_step(
    adapter: &ChannelAdapter,
    batch: &[(Vec<f64>, usize)],
    classifier: &Classifier,
    lr: f64,
) -> Result<(ChannelAdapter, f64)> {
    let mut next = adapter.clone();
    let loss = next.step(batch, classifier, lr)?;
    Ok((next, loss))
}
