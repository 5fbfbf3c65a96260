//! Seeded fixtures with planted structure.
//!
//! All randomness comes from [`crate::rng`], one stream per artifact, so a
//! config always reproduces the same bits.
//!
//! * Class text embeddings: `n_discriminative_channels` planted channels
//!   carry a per-channel random permutation of an evenly spaced grid in
//!   `[-planted_amplitude, planted_amplitude]` (one value per class); every
//!   other channel carries a class-independent shared value drawn from
//!   `N(0, 1/D)` plus i.i.d. `N(0, noise_sigma^2)` noise. Rows are then
//!   L2-normalized.
//! * Visual prototypes: `normalize(text_c + domain_shift * r_c)` with `r_c`
//!   a random unit direction per class, modelling the gap between text and
//!   aerial appearance.
//! * Scenes: non-overlapping rectangles laid out on a shuffled grid; pixels
//!   inside an instance hold its class prototype plus `N(0, noise_sigma^2)`,
//!   background pixels hold noise only. Proposals are the ground-truth
//!   rectangles shifted by up to `jitter` pixels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cachebank::ClassInstances;
use crate::eval::InstanceAnnotation;
use crate::pipeline::Proposal;
use crate::protocol::SeenUnseenSplit;
use crate::rng::CounterRng;
use crate::tensor::{l2_normalize, l2_normalize_rows, mask_pool, BinaryMask, EmbeddingMatrix, FeatureMap};
use crate::{Error, Result};

const STREAM_PLANTED_CHOICE: u64 = 1;
const STREAM_SHARED: u64 = 2;
const STREAM_PLANTED_VALUES: u64 = 3;
const STREAM_TEXT_NOISE: u64 = 4;
const STREAM_DOMAIN: u64 = 5;
const STREAM_BACKBONE: u64 = 6;
/// Scene `i` uses streams `SCENE_BASE + 4 * i ..`.
const SCENE_BASE: u64 = 1 << 32;
/// Scenes used for cache prototypes start here.
pub const TRAIN_SCENE_OFFSET: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_seen: usize,
    pub n_unseen: usize,
    #[serde(rename = "D_text")]
    pub d_text: usize,
    #[serde(rename = "D_backbone")]
    pub d_backbone: usize,
    pub n_discriminative_channels: usize,
    pub noise_sigma: f64,
    pub instances_per_class: usize,
    pub image_size: (usize, usize),
    pub planted_amplitude: f64,
    pub domain_shift: f64,
    pub jitter: usize,
    /// Noise on the in-vocabulary embedding of seen / unseen proposals.
    pub in_vocab_sigma_seen: f64,
    pub in_vocab_sigma_unseen: f64,
    pub n_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seen: 6,
            n_unseen: 2,
            d_text: 128,
            d_backbone: 64,
            n_discriminative_channels: 8,
            noise_sigma: 0.05,
            instances_per_class: 2,
            image_size: (48, 48),
            planted_amplitude: 0.25,
            domain_shift: 0.6,
            jitter: 1,
            in_vocab_sigma_seen: 0.02,
            in_vocab_sigma_unseen: 0.1,
            n_images: 4,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadConfig(msg.into()));
        if self.n_seen == 0 || self.n_unseen == 0 {
            return bad("n_seen and n_unseen must be at least 1");
        }
        if self.d_text == 0 || self.d_backbone == 0 || self.instances_per_class == 0 {
            return bad("channel and instance counts must be at least 1");
        }
        if self.n_discriminative_channels == 0 || self.n_discriminative_channels > self.d_text {
            return bad("n_discriminative_channels must lie in 1..=D_text");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        for v in [self.planted_amplitude, self.domain_shift, self.in_vocab_sigma_seen, self.in_vocab_sigma_unseen] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("amplitudes and noise levels must be finite and non-negative");
            }
        }
        if self.planted_amplitude == 0.0 {
            return bad("planted_amplitude must be positive");
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image_size must be positive");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_seen)
            .map(|i| format!("seen_{i:02}"))
            .chain((0..self.n_unseen).map(|i| format!("unseen_{i:02}")))
            .collect()
    }

    pub fn split(&self) -> SeenUnseenSplit {
        let names = self.class_names();
        SeenUnseenSplit {
            dataset_name: String::from("synth"),
            seen: names[..self.n_seen].to_vec(),
            unseen: names[self.n_seen..].to_vec(),
        }
    }

    pub fn is_seen(&self, class: usize) -> bool {
        class < self.n_seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEmbeddings {
    /// `N x D_text`, unit rows, labelled with the class names.
    pub embeddings: EmbeddingMatrix,
    /// Planted channel indices, ascending.
    pub planted: Vec<usize>,
}

/// `n` distinct channel indices out of `dim`, ascending.
fn choose_channels(rng: &mut CounterRng, dim: usize, n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..dim).collect();
    rng.shuffle(&mut all);
    let mut chosen = all[..n].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Evenly spaced grid of `n` values in `[-amp, amp]` (just `0` when `n = 1`).
fn grid(n: usize, amp: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -amp + 2.0 * amp * i as f64 / (n - 1) as f64).collect()
}

fn planted_matrix(
    seed: u64,
    stream_base: u64,
    n_classes: usize,
    dim: usize,
    n_planted: usize,
    amplitude: f64,
    noise_sigma: f64,
) -> (Vec<f64>, Vec<usize>) {
    let planted = choose_channels(&mut CounterRng::new(seed, stream_base + STREAM_PLANTED_CHOICE), dim, n_planted);
    let mut shared_rng = CounterRng::new(seed, stream_base + STREAM_SHARED);
    let mut value_rng = CounterRng::new(seed, stream_base + STREAM_PLANTED_VALUES);
    let mut noise_rng = CounterRng::new(seed, stream_base + STREAM_TEXT_NOISE);
    let scale = 1.0 / libm::sqrt(dim as f64);

    let mut data = vec![0.0; n_classes * dim];
    let mut is_planted = vec![false; dim];
    for &c in &planted {
        is_planted[c] = true;
    }
    for c in 0..dim {
        if is_planted[c] {
            let mut values = grid(n_classes, amplitude);
            value_rng.shuffle(&mut values);
            for (i, v) in values.into_iter().enumerate() {
                data[i * dim + c] = v;
            }
        } else {
            let shared = scale * shared_rng.normal();
            for i in 0..n_classes {
                data[i * dim + c] = shared + noise_sigma * noise_rng.normal();
            }
        }
    }
    (data, planted)
}

pub fn generate_class_embeddings(cfg: &SynthConfig) -> Result<PlantedEmbeddings> {
    cfg.validate()?;
    let n = cfg.num_classes();
    let (data, planted) = planted_matrix(
        cfg.seed,
        0,
        n,
        cfg.d_text,
        cfg.n_discriminative_channels,
        cfg.planted_amplitude,
        cfg.noise_sigma,
    );
    let m = EmbeddingMatrix::new(n, cfg.d_text, data)?.with_labels(cfg.class_names())?;
    Ok(PlantedEmbeddings { embeddings: l2_normalize_rows(&m)?, planted })
}

/// Visual prototypes per class (`N x D_text`, unit rows).
pub fn visual_prototypes(cfg: &SynthConfig) -> Result<EmbeddingMatrix> {
    let text = generate_class_embeddings(cfg)?.embeddings;
    let mut rng = CounterRng::new(cfg.seed, STREAM_DOMAIN);
    let mut rows = Vec::with_capacity(text.rows());
    for r in text.iter_rows() {
        let dir: Vec<f64> = (0..cfg.d_text).map(|_| rng.normal()).collect();
        let dir = l2_normalize(&dir)?;
        let shifted: Vec<f64> = r.iter().zip(&dir).map(|(t, d)| t + cfg.domain_shift * d).collect();
        rows.push(l2_normalize(&shifted)?);
    }
    EmbeddingMatrix::from_rows(&rows)?.with_labels(cfg.class_names())
}

/// Instance feature vectors grouped by class.
pub type ClassFeatures = Vec<Vec<Vec<f64>>>;

/// Per-seen-class backbone instance features (`instances_per_class` each,
/// `D_backbone` channels) and the planted backbone channels.
pub fn generate_backbone_features(cfg: &SynthConfig) -> Result<(ClassFeatures, Vec<usize>)> {
    cfg.validate()?;
    let n_planted = cfg.n_discriminative_channels.min(cfg.d_backbone);
    let base = STREAM_BACKBONE << 8;
    let (data, planted) =
        planted_matrix(cfg.seed, base, cfg.n_seen, cfg.d_backbone, n_planted, cfg.planted_amplitude, 0.0);
    let mut rng = CounterRng::new(cfg.seed, base + 100);
    let features = (0..cfg.n_seen)
        .map(|c| {
            let mean = &data[c * cfg.d_backbone..(c + 1) * cfg.d_backbone];
            (0..cfg.instances_per_class)
                .map(|_| mean.iter().map(|m| m + cfg.noise_sigma * rng.normal()).collect())
                .collect()
        })
        .collect();
    Ok((features, planted))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub feature_map: FeatureMap,
    pub annotations: Vec<InstanceAnnotation>,
    pub proposals: Vec<Proposal>,
}

pub fn scene_id(index: usize) -> String {
    format!("synth_{index:06}")
}

/// Builds scene `index`; every class appears `instances_per_class` times.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let text = generate_class_embeddings(cfg)?.embeddings;
    let visual = visual_prototypes(cfg)?;
    generate_scene_with(cfg, index, &text, &visual)
}

fn generate_scene_with(
    cfg: &SynthConfig,
    index: usize,
    text: &EmbeddingMatrix,
    visual: &EmbeddingMatrix,
) -> Result<Scene> {
    let (h, w) = cfg.image_size;
    let n_inst = cfg.num_classes() * cfg.instances_per_class;
    let grid_cols = (1..=n_inst).find(|c| c * c >= n_inst).unwrap_or(1);
    let grid_rows = n_inst.div_ceil(grid_cols);
    let (cell_h, cell_w) = (h / grid_rows, w / grid_cols);
    // a cell holds a rectangle of at least 2x2 plus a one-pixel gap
    if cell_h < 3 || cell_w < 3 {
        return Err(Error::DoesNotFit { instances: n_inst, height: h, width: w });
    }

    let stream = SCENE_BASE + 4 * index as u64;
    let mut layout_rng = CounterRng::new(cfg.seed, stream);
    let mut pixel_rng = CounterRng::new(cfg.seed, stream + 1);
    let mut proposal_rng = CounterRng::new(cfg.seed, stream + 2);
    let image_id = scene_id(index);

    let mut cells: Vec<usize> = (0..grid_rows * grid_cols).collect();
    layout_rng.shuffle(&mut cells);

    let d = cfg.d_text;
    let mut fm = FeatureMap::zeros(d, h, w)?;
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut annotations = Vec::with_capacity(n_inst);
    let mut rects = Vec::with_capacity(n_inst);
    for (i, &cell) in cells.iter().take(n_inst).enumerate() {
        let class = i % cfg.num_classes();
        let (cy, cx) = ((cell / grid_cols) * cell_h, (cell % grid_cols) * cell_w);
        let rh = 2 + layout_rng.below(cell_h - 2);
        let rw = 2 + layout_rng.below(cell_w - 2);
        let top = cy + layout_rng.below(cell_h - rh);
        let left = cx + layout_rng.below(cell_w - rw);
        let mask = BinaryMask::rect(h, w, top, left, rh, rw);
        for y in top..top + rh {
            for x in left..left + rw {
                owner[y * w + x] = Some(class);
            }
        }
        rects.push((top, left, rh, rw));
        annotations.push(InstanceAnnotation { image_id: image_id.clone(), class_id: class, mask });
    }

    let hw = h * w;
    let data = fm.data_mut();
    for (p, own) in owner.iter().enumerate() {
        for c in 0..d {
            let base = own.map_or(0.0, |cls| visual.get(cls, c));
            data[c * hw + p] = base + cfg.noise_sigma * pixel_rng.normal();
        }
    }

    let mut proposals = Vec::with_capacity(n_inst);
    for (i, &(top, left, rh, rw)) in rects.iter().enumerate() {
        let j = cfg.jitter as i64;
        let mut shift = |pos: usize, len: usize, limit: usize| -> usize {
            let delta = if j == 0 { 0 } else { proposal_rng.below((2 * j + 1) as usize) as i64 - j };
            (pos as i64 + delta).clamp(0, (limit - len) as i64) as usize
        };
        let (pt, pl) = (shift(top, rh, h), shift(left, rw, w));
        let class = annotations[i].class_id;
        let sigma = if cfg.is_seen(class) { cfg.in_vocab_sigma_seen } else { cfg.in_vocab_sigma_unseen };
        let embedding: Vec<f64> = text.row(class).iter().map(|t| t + sigma * proposal_rng.normal()).collect();
        proposals.push(Proposal {
            image_id: image_id.clone(),
            mask: BinaryMask::rect(h, w, pt, pl, rh, rw),
            score: proposal_rng.uniform_range(0.5, 1.0),
            embedding,
            gt_index: Some(i),
        });
    }

    Ok(Scene { image_id, feature_map: fm, annotations, proposals })
}

/// Test scenes `0..n_images`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let text = generate_class_embeddings(cfg)?.embeddings;
    let visual = visual_prototypes(cfg)?;
    (0..cfg.n_images).map(|i| generate_scene_with(cfg, i, &text, &visual)).collect()
}

/// Mask-pooled ground-truth features of each seen class, drawn from
/// dedicated training scenes until every class has `k` instances.
pub fn seen_instances(cfg: &SynthConfig, k: usize) -> Result<Vec<ClassInstances>> {
    cfg.validate()?;
    let text = generate_class_embeddings(cfg)?.embeddings;
    let visual = visual_prototypes(cfg)?;
    let mut out: Vec<ClassInstances> =
        (0..cfg.n_seen).map(|class| ClassInstances { class, embeddings: Vec::new() }).collect();
    let mut index = TRAIN_SCENE_OFFSET;
    while out.iter().any(|c| c.embeddings.len() < k) {
        let scene = generate_scene_with(cfg, index, &text, &visual)?;
        for a in &scene.annotations {
            if cfg.is_seen(a.class_id) && out[a.class_id].embeddings.len() < k {
                let pooled = mask_pool(&scene.feature_map, &a.mask)?;
                out[a.class_id].embeddings.push(pooled);
            }
        }
        index += 1;
    }
    Ok(out)
}

/// Knobs of [`unseen_top1`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrial {
    pub lambda: f64,
    pub k_channels: usize,
    pub cache_k: usize,
    pub alpha: f64,
    pub temperature: f64,
    pub beta_seen: f64,
    pub beta_unseen: f64,
}

/// Runs the whole prediction path on the test scenes of `cfg` and counts
/// `(correct, total)` top-1 decisions over proposals of unseen classes.
pub fn unseen_top1(cfg: &SynthConfig, trial: &FusionTrial) -> Result<(usize, usize)> {
    use crate::cachebank::build_seen_bank;
    use crate::dec::{build_refined_classifier, score_channels, select_top_k};
    use crate::ensemble::EnsembleConfig;
    use crate::pipeline::{complete_bank, pool_query, predict_query, ImageInput, PredictParams};

    let text = generate_class_embeddings(cfg)?.embeddings;
    let names = cfg.class_names();
    let score = score_channels(&text, trial.lambda)?;
    let sel = select_top_k(&score, trial.k_channels.min(cfg.d_text))?;
    let classifier = build_refined_classifier(&text, &sel, names.clone())?;
    let bank = build_seen_bank(&seen_instances(cfg, trial.cache_k)?, trial.cache_k, names)?;
    let seen_mask = (0..cfg.num_classes()).map(|c| cfg.is_seen(c)).collect();
    let params = PredictParams {
        alpha: trial.alpha,
        temperature: trial.temperature,
        ensemble: EnsembleConfig::new(trial.beta_seen, trial.beta_unseen, seen_mask)?,
    };
    let scenes = generate_dataset(cfg)?;
    let images: Vec<ImageInput> = scenes
        .iter()
        .map(|s| ImageInput { feature_map: s.feature_map.clone(), proposals: s.proposals.clone() })
        .collect();
    let bank = complete_bank(&classifier, &bank, &images, &params)?;

    let (mut correct, mut total) = (0, 0);
    for (scene, image) in scenes.iter().zip(&images) {
        for p in &image.proposals {
            let Some(gt) = p.gt_index else { continue };
            let class = scene.annotations[gt].class_id;
            if cfg.is_seen(class) {
                continue;
            }
            let query = pool_query(&image.feature_map, &p.mask)?;
            total += 1;
            correct += (predict_query(&classifier, &bank, p, &query, &params)?.class == class) as usize;
        }
    }
    Ok((correct, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dec::{score_channels, select_top_k};
    use crate::eval::{evaluate, Detection, Protocol};

    fn small() -> SynthConfig {
        SynthConfig {
            seed: 3,
            n_seen: 1,
            n_unseen: 1,
            d_text: 8,
            d_backbone: 8,
            n_discriminative_channels: 2,
            noise_sigma: 0.0,
            image_size: (16, 16),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_planted_channels_are_recovered() {
        let cfg = small();
        let p = generate_class_embeddings(&cfg).unwrap();
        let sel = select_top_k(&score_channels(&p.embeddings, 0.7).unwrap(), 2).unwrap();
        let mut got = sel.indices.clone();
        got.sort_unstable();
        assert_eq!(got, p.planted);
    }

    #[test]
    fn all_channels_planted() {
        let cfg = SynthConfig { n_discriminative_channels: 8, ..small() };
        let p = generate_class_embeddings(&cfg).unwrap();
        assert_eq!(p.planted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_class_embeddings(&cfg).unwrap(), generate_class_embeddings(&cfg).unwrap());
        let a = generate_scene(&cfg, 2).unwrap();
        let b = generate_scene(&cfg, 2).unwrap();
        assert_eq!(a, b);
        let bits = |s: &Scene| s.feature_map.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(generate_scene(&cfg, 3).unwrap().feature_map, a.feature_map);
    }

    #[test]
    fn bad_configs() {
        assert!(matches!(
            generate_class_embeddings(&SynthConfig { n_discriminative_channels: 200, ..SynthConfig::default() }),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            generate_scene(&SynthConfig { image_size: (8, 8), ..SynthConfig::default() }, 0),
            Err(Error::DoesNotFit { .. })
        ));
    }

    #[test]
    fn noiseless_pooling_returns_prototype() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..SynthConfig::default() };
        let scene = generate_scene(&cfg, 0).unwrap();
        let visual = visual_prototypes(&cfg).unwrap();
        for a in &scene.annotations {
            let pooled = mask_pool(&scene.feature_map, &a.mask).unwrap();
            assert!(pooled.iter().zip(visual.row(a.class_id)).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn masks_do_not_overlap() {
        let scene = generate_scene(&SynthConfig::default(), 1).unwrap();
        let h = scene.feature_map.height();
        let w = scene.feature_map.width();
        let mut count = vec![0; h * w];
        for a in &scene.annotations {
            for (i, &b) in a.mask.bits().iter().enumerate() {
                count[i] += b as usize;
            }
        }
        assert!(count.iter().all(|&c| c <= 1));
        assert_eq!(scene.annotations.len(), 16);
    }

    #[test]
    fn unjittered_proposals_score_perfect_ap() {
        let cfg = SynthConfig { jitter: 0, ..SynthConfig::default() };
        let scenes = generate_dataset(&cfg).unwrap();
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for s in &scenes {
            for p in &s.proposals {
                let gt = &s.annotations[p.gt_index.unwrap()];
                dets.push(Detection { image_id: p.image_id.clone(), class_id: gt.class_id, score: p.score, mask: p.mask.clone() });
            }
            gts.extend(s.annotations.iter().cloned());
        }
        let r = evaluate(&dets, &gts, &cfg.class_names(), &cfg.split(), Protocol::Gzsri).unwrap();
        assert!(r.classes.iter().all(|c| c.ap == Some(1.0)));
        assert_eq!(r.hm_map(), Some(100.0));
    }

    #[test]
    fn seen_instances_fill_k() {
        let cfg = SynthConfig::default();
        let inst = seen_instances(&cfg, 4).unwrap();
        assert_eq!(inst.len(), cfg.n_seen);
        assert!(inst.iter().all(|c| c.embeddings.len() == 4 && c.embeddings[0].len() == cfg.d_text));
    }

    #[test]
    fn backbone_features_shape() {
        let cfg = SynthConfig::default();
        let (f, planted) = generate_backbone_features(&cfg).unwrap();
        assert_eq!(f.len(), cfg.n_seen);
        assert_eq!(f[0].len(), cfg.instances_per_class);
        assert_eq!(f[0][0].len(), cfg.d_backbone);
        assert_eq!(planted.len(), cfg.n_discriminative_channels);
    }
}
