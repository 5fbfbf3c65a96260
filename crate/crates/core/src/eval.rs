//! Zero-shot instance-segmentation metrics.
//!
//! Per class: AP at IoU 0.5 (all-point interpolation over the pooled,
//! score-sorted detections) and Recall@100 at IoU 0.4/0.5/0.6, where the
//! top 100 detections of each image are kept regardless of class before
//! matching. Class means over seen and unseen classes are combined with the
//! harmonic mean. Per-class values are fractions; group values are
//! percentages.
//!
//! Matching is greedy per image and class: detections in descending score
//! order (ties by input order) take the unmatched ground truth with the
//! highest IoU at or above the threshold (ties by lower ground-truth index).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::protocol::SeenUnseenSplit;
use crate::tensor::BinaryMask;
use crate::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const AP_IOU: f64 = 0.5;
pub const MAX_DETS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceAnnotation {
    pub image_id: String,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ZSRI")]
    Zsri,
    #[serde(rename = "GZSRI")]
    Gzsri,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Zsri => "ZSRI",
            Protocol::Gzsri => "GZSRI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ZSRI" => Some(Protocol::Zsri),
            "GZSRI" => Some(Protocol::Gzsri),
            _ => None,
        }
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch { expected: a.height() * a.width(), got: b.height() * b.width() });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

fn iou_or_zero(a: &BinaryMask, b: &BinaryMask) -> f64 {
    mask_iou(a, b).unwrap_or(0.0)
}

/// Indices of `scores` by descending score, ties by ascending index.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching within one image and class. Returns `(detection index,
/// matched ground-truth index)` in processing order.
pub fn match_greedy(
    dets: &[Detection],
    gts: &[InstanceAnnotation],
    iou_thr: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    score_order(dets.iter().map(|d| d.score))
        .into_iter()
        .map(|di| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = iou_or_zero(&dets[di].mask, &gt.mask);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let matched = best.map(|(gi, _)| {
                taken[gi] = true;
                gi
            });
            (di, matched)
        })
        .collect()
}

fn by_image<T>(items: &[T], image: impl Fn(&T) -> &str) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        map.entry(image(it)).or_default().push(i);
    }
    map
}

/// True-positive flag per detection (input indexing) from per-image matching.
fn tp_flags(dets: &[Detection], gts: &[InstanceAnnotation], iou_thr: f64) -> Vec<bool> {
    let gt_by_image = by_image(gts, |g| &g.image_id);
    let mut flags = vec![false; dets.len()];
    for (image, det_idx) in by_image(dets, |d| &d.image_id) {
        let Some(gt_idx) = gt_by_image.get(image) else { continue };
        let image_dets: Vec<Detection> = det_idx.iter().map(|&i| dets[i].clone()).collect();
        let image_gts: Vec<InstanceAnnotation> = gt_idx.iter().map(|&i| gts[i].clone()).collect();
        for (local, matched) in match_greedy(&image_dets, &image_gts, iou_thr) {
            flags[det_idx[local]] = matched.is_some();
        }
    }
    flags
}

/// All-point interpolated AP for one class. `None` when there is no ground
/// truth.
pub fn average_precision(dets: &[Detection], gts: &[InstanceAnnotation], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let flags = tp_flags(dets, gts, iou_thr);
    let n_gt = gts.len() as f64;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    for i in score_order(dets.iter().map(|d| d.score)) {
        if flags[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (tp + fp));
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Keeps the `max_dets` highest-scoring detections of every image,
/// irrespective of class. Order of the survivors follows the input.
pub fn truncate_per_image(dets: &[Detection], max_dets: usize) -> Vec<Detection> {
    let mut keep = vec![false; dets.len()];
    for (_, idx) in by_image(dets, |d| &d.image_id) {
        for local in score_order(idx.iter().map(|&i| dets[i].score)).into_iter().take(max_dets) {
            keep[idx[local]] = true;
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect()
}

/// Fraction of one class's ground truth matched at `iou_thr`.
pub fn recall(dets: &[Detection], gts: &[InstanceAnnotation], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let gt_by_image = by_image(gts, |g| &g.image_id);
    let mut matched = 0usize;
    for (image, det_idx) in by_image(dets, |d| &d.image_id) {
        let Some(gt_idx) = gt_by_image.get(image) else { continue };
        let image_dets: Vec<Detection> = det_idx.iter().map(|&i| dets[i].clone()).collect();
        let image_gts: Vec<InstanceAnnotation> = gt_idx.iter().map(|&i| gts[i].clone()).collect();
        matched += match_greedy(&image_dets, &image_gts, iou_thr)
            .iter()
            .filter(|(_, m)| m.is_some())
            .count();
    }
    Some(matched as f64 / gts.len() as f64)
}

/// Recall@100 per class with ground truth, one value per threshold.
pub fn recall_at_100(
    dets: &[Detection],
    gts: &[InstanceAnnotation],
    iou_thrs: &[f64],
) -> BTreeMap<usize, Vec<f64>> {
    let kept = truncate_per_image(dets, MAX_DETS_PER_IMAGE);
    let mut out = BTreeMap::new();
    let classes: alloc::collections::BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    for c in classes {
        let d: Vec<Detection> = kept.iter().filter(|d| d.class_id == c).cloned().collect();
        let g: Vec<InstanceAnnotation> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        out.insert(c, iou_thrs.iter().map(|&t| recall(&d, &g, t).unwrap_or(0.0)).collect());
    }
    out
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub seen: bool,
    pub num_gt: usize,
    /// AP at [`AP_IOU`]; `None` without ground truth.
    pub ap: Option<f64>,
    /// Recall@100 per IoU threshold; `None` without ground truth.
    pub recall: Vec<Option<f64>>,
}

/// Seen/unseen class means (percent) and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub hm: Option<f64>,
}

impl GroupMetric {
    fn new(seen: Option<f64>, unseen: Option<f64>) -> Self {
        let hm = match (seen, unseen) {
            (Some(s), Some(u)) => Some(harmonic_mean(s, u)),
            _ => None,
        };
        Self { seen, unseen, hm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub ap_iou: f64,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassMetrics>,
    pub map: GroupMetric,
    /// One entry per IoU threshold.
    pub recall: Vec<GroupMetric>,
}

impl EvalReport {
    fn recall_group(&self, thr: f64) -> Option<&GroupMetric> {
        self.iou_thresholds
            .iter()
            .position(|t| (t - thr).abs() < 1e-12)
            .map(|i| &self.recall[i])
    }

    pub fn map_seen(&self) -> Option<f64> {
        self.map.seen
    }

    pub fn map_unseen(&self) -> Option<f64> {
        self.map.unseen
    }

    pub fn hm_map(&self) -> Option<f64> {
        self.map.hm
    }

    pub fn recall_seen(&self) -> Option<f64> {
        self.recall_group(0.5).and_then(|g| g.seen)
    }

    pub fn recall_unseen(&self) -> Option<f64> {
        self.recall_group(0.5).and_then(|g| g.unseen)
    }

    pub fn hm_recall(&self) -> Option<f64> {
        self.recall_group(0.5).and_then(|g| g.hm)
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

fn mean_percent(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(100.0 * v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Full report. `categories[class_id]` names each class; every category must
/// belong to the split. Under ZSRI only unseen classes are evaluated and
/// detections of seen classes are discarded.
pub fn evaluate(
    dets: &[Detection],
    gts: &[InstanceAnnotation],
    categories: &[String],
    split: &SeenUnseenSplit,
    protocol: Protocol,
) -> Result<EvalReport> {
    split.validate()?;
    let mut is_seen = Vec::with_capacity(categories.len());
    for name in categories {
        match (split.is_seen(name), split.is_unseen(name)) {
            (true, _) => is_seen.push(true),
            (_, true) => is_seen.push(false),
            _ => return Err(Error::SplitMismatch(alloc::format!("category '{name}' is not in the split"))),
        }
    }
    let n = categories.len();
    for c in dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)) {
        if c >= n {
            return Err(Error::LabelOutOfRange { label: c, classes: n });
        }
    }
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::NonFiniteInput);
        }
    }
    let evaluated = |c: usize| protocol == Protocol::Gzsri || !is_seen[c];

    let dets: Vec<Detection> = dets.iter().filter(|d| evaluated(d.class_id)).cloned().collect();
    let gts: Vec<InstanceAnnotation> = gts.iter().filter(|g| evaluated(g.class_id)).cloned().collect();
    if gts.is_empty() {
        return Err(Error::EmptySplit);
    }
    let kept = truncate_per_image(&dets, MAX_DETS_PER_IMAGE);

    let mut classes = Vec::new();
    for c in (0..n).filter(|&c| evaluated(c)) {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let ck: Vec<Detection> = kept.iter().filter(|d| d.class_id == c).cloned().collect();
        let cg: Vec<InstanceAnnotation> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        classes.push(ClassMetrics {
            class_id: c,
            name: categories[c].clone(),
            seen: is_seen[c],
            num_gt: cg.len(),
            ap: average_precision(&cd, &cg, AP_IOU),
            recall: IOU_THRESHOLDS.iter().map(|&t| recall(&ck, &cg, t)).collect(),
        });
    }

    let group = |seen: bool, value: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        mean_percent(classes.iter().filter(|m| m.seen == seen).filter_map(value))
    };
    let map = GroupMetric::new(group(true, &|m| m.ap), group(false, &|m| m.ap));
    let recall = (0..IOU_THRESHOLDS.len())
        .map(|t| GroupMetric::new(group(true, &|m| m.recall[t]), group(false, &|m| m.recall[t])))
        .collect();
    Ok(EvalReport {
        protocol,
        ap_iou: AP_IOU,
        iou_thresholds: IOU_THRESHOLDS.to_vec(),
        classes,
        map,
        recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn m(points: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_points(4, 4, points)
    }

    fn det(img: &str, class: usize, score: f64, mask: BinaryMask) -> Detection {
        Detection { image_id: img.to_string(), class_id: class, score, mask }
    }

    fn gt(img: &str, class: usize, mask: BinaryMask) -> InstanceAnnotation {
        InstanceAnnotation { image_id: img.to_string(), class_id: class, mask }
    }

    #[test]
    fn iou_cases() {
        let a = m(&[(0, 0), (0, 1)]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &m(&[(3, 3)])).unwrap(), 0.0);
        let b = m(&[(0, 1), (1, 1)]);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&m(&[]), &m(&[])), Err(Error::BothEmpty));
        assert!(matches!(mask_iou(&a, &BinaryMask::empty(2, 2)), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn single_perfect_match() {
        let g = [gt("a", 0, m(&[(1, 1)]))];
        let d = [det("a", 0, 0.9, m(&[(1, 1)]))];
        assert_eq!(match_greedy(&d, &g, 0.5), vec![(0, Some(0))]);
    }

    #[test]
    fn higher_score_wins_duplicate() {
        let g = [gt("a", 0, m(&[(1, 1)]))];
        let d = [det("a", 0, 0.3, m(&[(1, 1)])), det("a", 0, 0.8, m(&[(1, 1)]))];
        assert_eq!(match_greedy(&d, &g, 0.5), vec![(1, Some(0)), (0, None)]);
    }

    #[test]
    fn ap_cases() {
        let g1 = [gt("a", 0, m(&[(0, 0)]))];
        assert_eq!(average_precision(&[det("a", 0, 0.5, m(&[(0, 0)]))], &g1, 0.5), Some(1.0));
        assert_eq!(average_precision(&[det("a", 0, 0.5, m(&[(3, 3)]))], &g1, 0.5), Some(0.0));
        assert_eq!(average_precision(&[], &g1, 0.5), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0.5), None);

        let g2 = [gt("a", 0, m(&[(0, 0)])), gt("a", 0, m(&[(2, 2)]))];
        let d = [
            det("a", 0, 0.9, m(&[(0, 0)])),
            det("a", 0, 0.8, m(&[(3, 3)])),
            det("a", 0, 0.7, m(&[(2, 2)])),
        ];
        let ap = average_precision(&d, &g2, 0.5).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn recall_threshold_sensitivity() {
        // det covers 9 pixels, gt 4 of them plus 0 extra -> IoU 4/9 ~ 0.444
        let g = [gt("a", 0, BinaryMask::rect(4, 4, 0, 0, 2, 2))];
        let d = [det("a", 0, 0.9, BinaryMask::rect(4, 4, 0, 0, 3, 3))];
        let r = recall_at_100(&d, &g, &IOU_THRESHOLDS);
        assert_eq!(r[&0], vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn recall_truncates_per_image_across_classes() {
        let target = BinaryMask::rect(4, 4, 0, 0, 2, 2);
        let g = [gt("a", 0, target.clone())];
        let mut d: Vec<Detection> = (0..100)
            .map(|i| det("a", 1 + i % 3, 1.0 - i as f64 * 1e-3, BinaryMask::rect(4, 4, 3, 3, 1, 1)))
            .collect();
        d.extend((0..19).map(|i| det("a", 2, 0.1 - i as f64 * 1e-3, target.clone())));
        d.push(det("a", 0, 0.5, target.clone()));
        // the correct detection ranks 101st of 120
        assert_eq!(recall_at_100(&d, &g, &[0.5])[&0], vec![0.0]);
        d.last_mut().unwrap().score = 0.95;
        assert_eq!(recall_at_100(&d, &g, &[0.5])[&0], vec![1.0]);
    }

    #[test]
    fn harmonic_means_from_reported_tables() {
        assert!((harmonic_mean(47.05, 9.30) - 15.53).abs() <= 0.01);
        assert!((harmonic_mean(80.57, 12.26) - 21.28).abs() <= 0.01);
        assert_eq!(harmonic_mean(5.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(7.5, 7.5) - 7.5).abs() < 1e-15);
    }

    fn split() -> SeenUnseenSplit {
        SeenUnseenSplit::new("toy", vec!["a".into(), "b".into()], vec!["c".into()]).unwrap()
    }

    fn cats() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn perfect_predictions_score_100() {
        let gts = [
            gt("i", 0, m(&[(0, 0)])),
            gt("i", 1, m(&[(1, 1)])),
            gt("j", 2, m(&[(2, 2)])),
        ];
        let dets: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.class_id, 0.9, g.mask.clone())).collect();
        let r = evaluate(&dets, &gts, &cats(), &split(), Protocol::Gzsri).unwrap();
        assert_eq!(r.hm_map(), Some(100.0));
        assert_eq!(r.hm_recall(), Some(100.0));
        assert!(r.classes.iter().all(|c| c.ap == Some(1.0)));

        let z = evaluate(&dets, &gts, &cats(), &split(), Protocol::Zsri).unwrap();
        assert_eq!(z.classes.len(), 1);
        assert_eq!(z.map_unseen(), Some(100.0));
        assert_eq!(z.map_seen(), None);
    }

    #[test]
    fn no_unseen_detections_zero_hm() {
        let gts = [gt("i", 0, m(&[(0, 0)])), gt("i", 2, m(&[(2, 2)]))];
        let dets = [det("i", 0, 0.9, m(&[(0, 0)]))];
        let r = evaluate(&dets, &gts, &cats(), &split(), Protocol::Gzsri).unwrap();
        assert_eq!(r.map_unseen(), Some(0.0));
        assert_eq!(r.hm_map(), Some(0.0));
        // class b has no ground truth and is excluded from the seen mean
        assert_eq!(r.map_seen(), Some(100.0));
        assert_eq!(r.class(1).unwrap().ap, None);
    }

    #[test]
    fn evaluate_errors() {
        let gts = [gt("i", 0, m(&[(0, 0)]))];
        assert_eq!(evaluate(&[], &gts, &cats(), &split(), Protocol::Zsri), Err(Error::EmptySplit));
        let bad = vec!["a".into(), "zzz".into(), "c".into()];
        assert!(matches!(evaluate(&[], &gts, &bad, &split(), Protocol::Gzsri), Err(Error::SplitMismatch(_))));
    }
}
