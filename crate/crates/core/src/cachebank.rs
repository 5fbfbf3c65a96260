//! Cache bank of visual prototypes and prior-injected prediction.
//!
//! Keys are L2-normalized prototype embeddings, values their one-hot class
//! labels. A query's cache prediction is `softmax(q . keys^T) . values`,
//! added to the classifier's cosine scores with weight `alpha`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dec::Classifier;
use crate::tensor::{dot, l2_normalize, l2_normalize_rows, softmax, EmbeddingMatrix};
use crate::{Error, Result};

pub const DEFAULT_CACHE_K: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "seen-groundtruth")]
    SeenGroundTruth,
    #[serde(rename = "unseen-pseudo")]
    UnseenPseudo,
}

/// Instance embeddings of one seen class, in preference order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInstances {
    pub class: usize,
    pub embeddings: Vec<Vec<f64>>,
}

/// Scored candidate embeddings for one unseen class.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSamples {
    pub class: usize,
    pub candidates: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheBank {
    keys: EmbeddingMatrix,
    labels: Vec<usize>,
    provenance: Vec<Provenance>,
    class_names: Vec<String>,
    k: usize,
    p: usize,
}

/// Rows appended per unseen class for seen cache size `k`.
pub fn pseudo_rows(k: usize) -> usize {
    (k / 2).max(1)
}

impl CacheBank {
    /// Reassembles a bank and checks every invariant.
    pub fn from_parts(
        keys: &EmbeddingMatrix,
        labels: Vec<usize>,
        provenance: Vec<Provenance>,
        class_names: Vec<String>,
        k: usize,
        p: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroCacheSize);
        }
        if labels.len() != keys.rows() || provenance.len() != keys.rows() {
            return Err(Error::LengthMismatch { left: keys.rows(), right: labels.len().min(provenance.len()) });
        }
        let n = class_names.len();
        let mut seen_rows = vec![0usize; n];
        let mut pseudo = vec![0usize; n];
        for (&l, &prov) in labels.iter().zip(&provenance) {
            if l >= n {
                return Err(Error::LabelOutOfRange { label: l, classes: n });
            }
            match prov {
                Provenance::SeenGroundTruth => seen_rows[l] += 1,
                Provenance::UnseenPseudo => pseudo[l] += 1,
            }
        }
        for c in 0..n {
            let ok = match (seen_rows[c], pseudo[c]) {
                (0, 0) => p == 0,
                (s, 0) => s == k,
                (0, u) => u == p,
                _ => false,
            };
            if !ok {
                return Err(Error::InsufficientInstances { class: c, have: seen_rows[c] + pseudo[c], need: k });
            }
        }
        let keys = keys.normalized()?;
        Ok(Self { keys, labels, provenance, class_names, k, p })
    }

    pub fn keys(&self) -> &EmbeddingMatrix {
        &self.keys
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }

    /// Seen prototypes per class.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Pseudo rows per unseen class (0 before augmentation).
    pub fn p(&self) -> usize {
        self.p
    }

    /// Classes without any row yet.
    pub fn missing_classes(&self) -> Vec<usize> {
        let mut present = vec![false; self.num_classes()];
        for &l in &self.labels {
            present[l] = true;
        }
        (0..self.num_classes()).filter(|&c| !present[c]).collect()
    }

    /// One-hot label matrix, `len() x num_classes()`.
    pub fn values(&self) -> EmbeddingMatrix {
        let n = self.num_classes();
        let mut data = vec![0.0; self.len() * n];
        for (r, &l) in self.labels.iter().enumerate() {
            data[r * n + l] = 1.0;
        }
        EmbeddingMatrix::new(self.len(), n, data).expect("one-hot matrix is well formed")
    }

    /// `softmax(normalize(query) . keys^T) . values`.
    pub fn cache_logits(&self, query: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        if query.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: query.len() });
        }
        let q = l2_normalize(query)?;
        let affinity: Vec<f64> = self.keys.iter_rows().map(|k| dot(&q, k)).collect();
        let weights = softmax(&affinity)?;
        let mut out = vec![0.0; self.num_classes()];
        for (w, &l) in weights.iter().zip(&self.labels) {
            out[l] += w;
        }
        Ok(out)
    }
}

/// Builds the seen part of the bank from the first `k` embeddings of each
/// class, in input order. `class_names` spans every class, seen and unseen.
pub fn build_seen_bank(seen: &[ClassInstances], k: usize, class_names: Vec<String>) -> Result<CacheBank> {
    if k == 0 {
        return Err(Error::ZeroCacheSize);
    }
    let n = class_names.len();
    let mut used = vec![false; n];
    let mut rows: Vec<&[f64]> = Vec::with_capacity(seen.len() * k);
    let mut labels = Vec::with_capacity(seen.len() * k);
    for inst in seen {
        if inst.class >= n {
            return Err(Error::LabelOutOfRange { label: inst.class, classes: n });
        }
        if core::mem::replace(&mut used[inst.class], true) {
            return Err(Error::DuplicateClass(inst.class));
        }
        if inst.embeddings.len() < k {
            return Err(Error::InsufficientInstances { class: inst.class, have: inst.embeddings.len(), need: k });
        }
        for e in &inst.embeddings[..k] {
            rows.push(e);
            labels.push(inst.class);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyBank);
    }
    let keys = l2_normalize_rows(&EmbeddingMatrix::from_rows(&rows)?)?;
    let provenance = vec![Provenance::SeenGroundTruth; labels.len()];
    Ok(CacheBank { keys, labels, provenance, class_names, k, p: 0 })
}

/// Appends, for every class missing from `bank`, its top-scored pseudo
/// embedding replicated `max(1, K/2)` times. Rows are appended in ascending
/// class order; score ties go to the earlier candidate.
pub fn augment_unseen(bank: &CacheBank, pseudo: &[PseudoSamples]) -> Result<CacheBank> {
    let n = bank.num_classes();
    let missing = bank.missing_classes();
    let mut best: Vec<Option<&[f64]>> = vec![None; n];
    for ps in pseudo {
        if ps.class >= n {
            return Err(Error::LabelOutOfRange { label: ps.class, classes: n });
        }
        if !missing.contains(&ps.class) || best[ps.class].is_some() {
            return Err(Error::DuplicateClass(ps.class));
        }
        let mut top: Option<(f64, &[f64])> = None;
        for (score, emb) in &ps.candidates {
            if !score.is_finite() {
                return Err(Error::NonFiniteInput);
            }
            if top.is_none_or(|(s, _)| *score > s) {
                top = Some((*score, emb));
            }
        }
        best[ps.class] = top.map(|(_, e)| e);
    }

    let p = pseudo_rows(bank.k);
    let mut data = bank.keys.data().to_vec();
    let mut labels = bank.labels.clone();
    let mut provenance = bank.provenance.clone();
    for &c in &missing {
        let emb = best[c].ok_or(Error::MissingUnseenClass(c))?;
        if emb.len() != bank.dim() {
            return Err(Error::DimMismatch { expected: bank.dim(), got: emb.len() });
        }
        let unit = l2_normalize(emb)?;
        for _ in 0..p {
            data.extend_from_slice(&unit);
            labels.push(c);
            provenance.push(Provenance::UnseenPseudo);
        }
    }
    let keys = l2_normalize_rows(&EmbeddingMatrix::new(labels.len(), bank.dim(), data)?)?;
    Ok(CacheBank {
        keys,
        labels,
        provenance,
        class_names: bank.class_names.clone(),
        k: bank.k,
        p: if missing.is_empty() { bank.p } else { p },
    })
}

/// Classifier cosine scores plus `alpha` times the cache prediction, for a
/// full-dimension query.
pub fn prior_injected_logits(
    classifier: &Classifier,
    bank: &CacheBank,
    query: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    if classifier.num_classes() != bank.num_classes() {
        return Err(Error::ClassCountMismatch { classifier: classifier.num_classes(), bank: bank.num_classes() });
    }
    if !alpha.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let base = classifier.classify_full(query)?;
    let cache = bank.cache_logits(query)?;
    Ok(base.iter().zip(&cache).map(|(b, c)| b + alpha * c).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use alloc::string::ToString;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| i.to_string()).collect()
    }

    fn randn(rng: &mut CounterRng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    #[test]
    fn orthogonal_two_class_bank() {
        let seen = [
            ClassInstances { class: 0, embeddings: vec![vec![1.0, 0.0, 0.0]] },
            ClassInstances { class: 1, embeddings: vec![vec![0.0, 1.0, 0.0]] },
        ];
        let bank = build_seen_bank(&seen, 1, names(2)).unwrap();
        assert_eq!(bank.keys().rows(), 2);
        assert_eq!(bank.values().data(), &[1.0, 0.0, 0.0, 1.0]);
        let l = bank.cache_logits(&[1.0, 0.0, 0.0]).unwrap();
        let e = core::f64::consts::E;
        assert!((l[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((l[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn seen_bank_matches_concatenation_oracle() {
        let mut rng = CounterRng::new(4, 0);
        let seen: Vec<ClassInstances> = [2usize, 0, 1]
            .iter()
            .map(|&c| ClassInstances { class: c, embeddings: (0..3).map(|_| randn(&mut rng, 5)).collect() })
            .collect();
        let bank = build_seen_bank(&seen, 2, names(3)).unwrap();
        let mut expect_rows = Vec::new();
        let mut expect_labels = Vec::new();
        for ci in &seen {
            for e in ci.embeddings.iter().take(2) {
                let n: f64 = libm::sqrt(e.iter().map(|x| x * x).sum());
                expect_rows.push(e.iter().map(|x| x / n).collect::<Vec<_>>());
                expect_labels.push(ci.class);
            }
        }
        assert_eq!(bank.labels(), &expect_labels[..]);
        for (r, row) in expect_rows.iter().enumerate() {
            for (a, b) in bank.keys().row(r).iter().zip(row) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(bank.provenance().iter().all(|&p| p == Provenance::SeenGroundTruth));
    }

    #[test]
    fn insufficient_instances() {
        let seen = [ClassInstances { class: 1, embeddings: vec![vec![1.0, 0.0]] }];
        assert_eq!(
            build_seen_bank(&seen, 4, names(2)),
            Err(Error::InsufficientInstances { class: 1, have: 1, need: 4 })
        );
    }

    fn two_seen_one_unseen(k: usize) -> (CacheBank, Vec<PseudoSamples>) {
        let mut rng = CounterRng::new(8, 0);
        let seen: Vec<ClassInstances> = (0..2)
            .map(|c| ClassInstances { class: c, embeddings: (0..k).map(|_| randn(&mut rng, 4)).collect() })
            .collect();
        let bank = build_seen_bank(&seen, k, names(3)).unwrap();
        let pseudo = vec![PseudoSamples {
            class: 2,
            candidates: vec![(0.3, randn(&mut rng, 4)), (0.9, vec![0.0, 0.0, 2.0, 0.0]), (0.9, randn(&mut rng, 4))],
        }];
        (bank, pseudo)
    }

    #[test]
    fn augment_replicates_top1_half_cache() {
        let (bank, pseudo) = two_seen_one_unseen(4);
        let aug = augment_unseen(&bank, &pseudo).unwrap();
        assert_eq!(aug.len(), 10);
        assert_eq!(aug.p(), 2);
        assert_eq!(aug.values().cols(), 3);
        assert_eq!(&aug.labels()[8..], &[2, 2]);
        assert_eq!(aug.keys().row(8), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(aug.keys().row(9), aug.keys().row(8));
        assert_eq!(&aug.provenance()[8..], &[Provenance::UnseenPseudo; 2]);
        assert!(aug.missing_classes().is_empty());
    }

    #[test]
    fn augment_with_k1_adds_one_row() {
        let (bank, pseudo) = two_seen_one_unseen(1);
        let aug = augment_unseen(&bank, &pseudo).unwrap();
        assert_eq!(aug.len(), 3);
        assert_eq!(aug.p(), 1);
    }

    #[test]
    fn augment_missing_class() {
        let (bank, mut pseudo) = two_seen_one_unseen(2);
        pseudo[0].candidates.clear();
        assert_eq!(augment_unseen(&bank, &pseudo), Err(Error::MissingUnseenClass(2)));
        assert_eq!(augment_unseen(&bank, &[]), Err(Error::MissingUnseenClass(2)));
    }

    #[test]
    fn identical_keys_give_label_distribution() {
        let seen = [
            ClassInstances { class: 0, embeddings: vec![vec![1.0, 1.0]; 2] },
            ClassInstances { class: 1, embeddings: vec![vec![2.0, 2.0]; 2] },
        ];
        let bank = build_seen_bank(&seen, 2, names(3)).unwrap();
        let l = bank.cache_logits(&[0.3, -1.0]).unwrap();
        assert!((l[0] - 0.5).abs() < 1e-12 && (l[1] - 0.5).abs() < 1e-12 && l[2] == 0.0);
    }

    #[test]
    fn cache_logits_match_matmul_oracle() {
        let mut rng = CounterRng::new(10, 0);
        let seen: Vec<ClassInstances> = (0..5)
            .map(|c| ClassInstances { class: c, embeddings: (0..2).map(|_| randn(&mut rng, 6)).collect() })
            .collect();
        let bank = build_seen_bank(&seen, 2, names(5)).unwrap();
        let q = randn(&mut rng, 6);
        let qn: f64 = libm::sqrt(q.iter().map(|x| x * x).sum());
        let keys = bank.keys();
        let values = bank.values();
        let m: Vec<f64> = (0..10)
            .map(|r| (0..6).map(|j| q[j] / qn * keys.get(r, j)).sum())
            .collect();
        let z: f64 = m.iter().map(|v| libm::exp(*v)).sum();
        let got = bank.cache_logits(&q).unwrap();
        for c in 0..5 {
            let expect: f64 = (0..10).map(|r| libm::exp(m[r]) / z * values.get(r, c)).sum();
            assert!((got[c] - expect).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cache_logits_errors() {
        let seen = [ClassInstances { class: 0, embeddings: vec![vec![1.0, 0.0]] }];
        let bank = build_seen_bank(&seen, 1, names(1)).unwrap();
        assert!(matches!(bank.cache_logits(&[1.0]), Err(Error::DimMismatch { .. })));
        assert_eq!(build_seen_bank(&[], 1, names(1)), Err(Error::EmptyBank));
    }

    #[test]
    fn prior_injection_composes() {
        let mut rng = CounterRng::new(12, 0);
        let text = EmbeddingMatrix::from_rows(&(0..3).map(|_| randn(&mut rng, 5)).collect::<Vec<_>>()).unwrap();
        let clf = Classifier::naive(&text, names(3)).unwrap();
        let seen: Vec<ClassInstances> = (0..3)
            .map(|c| ClassInstances { class: c, embeddings: (0..2).map(|_| randn(&mut rng, 5)).collect() })
            .collect();
        let bank = build_seen_bank(&seen, 2, names(3)).unwrap();
        let q = randn(&mut rng, 5);
        let zero = prior_injected_logits(&clf, &bank, &q, 0.0).unwrap();
        assert_eq!(zero, clf.classify(&q).unwrap());
        let half = prior_injected_logits(&clf, &bank, &q, 0.5).unwrap();
        let a = clf.classify(&q).unwrap();
        let b = bank.cache_logits(&q).unwrap();
        for c in 0..3 {
            assert!((half[c] - (a[c] + 0.5 * b[c])).abs() < 1e-15);
        }
        let other = build_seen_bank(&seen[..2], 2, names(2)).unwrap();
        assert!(matches!(prior_injected_logits(&clf, &other, &q, 0.5), Err(Error::ClassCountMismatch { .. })));
    }

    #[test]
    fn from_parts_checks_counts() {
        let (bank, pseudo) = two_seen_one_unseen(4);
        let aug = augment_unseen(&bank, &pseudo).unwrap();
        let back = CacheBank::from_parts(
            aug.keys(),
            aug.labels().to_vec(),
            aug.provenance().to_vec(),
            aug.class_names().to_vec(),
            4,
            2,
        )
        .unwrap();
        assert_eq!(back, aug);
        assert!(CacheBank::from_parts(aug.keys(), aug.labels().to_vec(), aug.provenance().to_vec(), names(3), 4, 3)
            .is_err());
    }
}
