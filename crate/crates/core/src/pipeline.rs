//! Per-proposal prediction: mask pooling, prior-injected logits, ensemble.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cachebank::{augment_unseen, prior_injected_logits, CacheBank, PseudoSamples};
use crate::dec::Classifier;
use crate::ensemble::{final_prediction, EnsembleConfig, Prediction};
use crate::eval::Detection;
use crate::tensor::{l2_normalize, mask_pool, BinaryMask, FeatureMap};
use crate::Result;

/// Default softmax temperature for cosine logits.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Class-agnostic mask proposal with its in-vocabulary class embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub image_id: String,
    pub mask: BinaryMask,
    /// Objectness / mask quality in `[0, 1]`.
    pub score: f64,
    /// Embedding from the trained (in-vocabulary) branch, full dimension.
    pub embedding: Vec<f64>,
    /// Ground-truth instance the proposal was derived from, if known.
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictParams {
    pub alpha: f64,
    pub temperature: f64,
    pub ensemble: EnsembleConfig,
}

/// Mask-pooled, L2-normalized query vector.
pub fn pool_query(fm: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    l2_normalize(&mask_pool(fm, mask)?)
}

/// One image: its feature map and proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub feature_map: FeatureMap,
    pub proposals: Vec<Proposal>,
}

/// Fused prediction for one proposal given its pooled query.
pub fn predict_query(
    classifier: &Classifier,
    bank: &CacheBank,
    proposal: &Proposal,
    query: &[f64],
    params: &PredictParams,
) -> Result<Prediction> {
    let in_vocab = classifier.classify_full(&proposal.embedding)?;
    let pip = prior_injected_logits(classifier, bank, query, params.alpha)?;
    final_prediction(&in_vocab, &pip, &params.ensemble, params.temperature)
}

/// Detections for one image, in proposal order. The detection score is the
/// fused class probability times the proposal score.
pub fn predict_image(
    classifier: &Classifier,
    bank: &CacheBank,
    image: &ImageInput,
    params: &PredictParams,
) -> Result<Vec<Detection>> {
    image
        .proposals
        .iter()
        .map(|p| {
            let query = pool_query(&image.feature_map, &p.mask)?;
            let pred = predict_query(classifier, bank, p, &query, params)?;
            Ok(Detection {
                image_id: p.image_id.clone(),
                class_id: pred.class,
                score: pred.probability * p.score,
                mask: p.mask.clone(),
            })
        })
        .collect()
}

/// Pseudo-sample candidates for every class missing from `bank`: each
/// proposal's pooled query scored by the cache-free fused probability of
/// that class.
pub fn collect_pseudo(
    classifier: &Classifier,
    bank: &CacheBank,
    images: &[ImageInput],
    params: &PredictParams,
) -> Result<Vec<PseudoSamples>> {
    let missing = bank.missing_classes();
    let mut out: Vec<PseudoSamples> = missing
        .iter()
        .map(|&class| PseudoSamples { class, candidates: Vec::new() })
        .collect();
    if missing.is_empty() {
        return Ok(out);
    }
    for image in images {
        for p in &image.proposals {
            let query = pool_query(&image.feature_map, &p.mask)?;
            let in_vocab = classifier.classify_full(&p.embedding)?;
            let zero_shot = classifier.classify_full(&query)?;
            let pred = final_prediction(&in_vocab, &zero_shot, &params.ensemble, params.temperature)?;
            for ps in out.iter_mut() {
                ps.candidates.push((pred.probabilities[ps.class], query.clone()));
            }
        }
    }
    Ok(out)
}

/// Fills the unseen part of the bank from the images when it is missing.
pub fn complete_bank(
    classifier: &Classifier,
    bank: &CacheBank,
    images: &[ImageInput],
    params: &PredictParams,
) -> Result<CacheBank> {
    if bank.missing_classes().is_empty() {
        return Ok(bank.clone());
    }
    let pseudo = collect_pseudo(classifier, bank, images, params)?;
    augment_unseen(bank, &pseudo)
}

/// Argmax of the prior-injected logits alone (no ensemble), used to measure
/// the effect of the cache weight.
pub fn pip_top1(classifier: &Classifier, bank: &CacheBank, query: &[f64], alpha: f64) -> Result<usize> {
    let logits = prior_injected_logits(classifier, bank, query, alpha)?;
    Ok(crate::ensemble::argmax(&logits))
}
