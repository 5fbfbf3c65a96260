//! One function per subcommand. Each reads its inputs, calls into the core
//! and writes its outputs plus an effective-config snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use zori_core::cachebank::{build_seen_bank, ClassInstances, PseudoSamples};
use zori_core::dec::{
    average_prompt_templates, build_refined_classifier, score_channels, select_top_k, ChannelSelection, Classifier,
};
use zori_core::ensemble::EnsembleConfig;
use zori_core::eval::{evaluate, Detection, Protocol};
use zori_core::kma::{class_means, partition_channels, ChannelAdapter, ChannelPartition};
use zori_core::pipeline::{collect_pseudo, predict_image, ImageInput, PredictParams, Proposal};
use zori_core::protocol::{filter_test, filter_train_detailed, AnnotationSet, ImageInfo, SeenUnseenSplit};
use zori_core::synth;
use zori_core::tensor::{EmbeddingMatrix, FeatureMap};

use crate::config::RunConfig;
use crate::error::{Result, ZoriError};
use crate::formats::{self, write_json};
use crate::zemb::{self, Tensor};

/// `<dir>/effective_config.json` for directories, `<file>.config.json`
/// otherwise.
pub fn snapshot_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("effective_config.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".config.json");
        output.with_file_name(name)
    }
}

pub fn write_snapshot(output: &Path, cfg: &RunConfig) -> Result<()> {
    let path = snapshot_path(output);
    fs::write(&path, cfg.to_json()).map_err(|e| ZoriError::io(&path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| ZoriError::io(p, e)),
        _ => Ok(()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ZoriError::io(dir, e))
}

fn split_of(cfg: &RunConfig) -> Result<SeenUnseenSplit> {
    let name_or_path = cfg.split.as_deref().ok_or_else(|| ZoriError::config("split", "a split is required"))?;
    formats::resolve_split(name_or_path)
}

/// Class embeddings from a rank-2 file, or a rank-3 stack of per-template
/// embeddings averaged into one matrix. Labels come from the file.
pub fn load_class_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let t = zemb::read(path)?;
    match t.rank() {
        2 => t.to_matrix(),
        3 => Ok(average_prompt_templates(&t.to_matrices()?)?),
        r => Err(ZoriError::Usage(format!("{}: expected rank 2 or 3, got {r}", path.display()))),
    }
}

fn class_names_of(m: &EmbeddingMatrix, path: &Path) -> Result<Vec<String>> {
    m.labels()
        .map(<[String]>::to_vec)
        .ok_or_else(|| ZoriError::Usage(format!("{}: rows need class labels", path.display())))
}

pub fn select_channels(cfg: &RunConfig, embeddings: &Path, out: &Path) -> Result<ChannelSelection> {
    let m = load_class_embeddings(embeddings)?;
    let sel = select_top_k(&score_channels(&m, cfg.lambda)?, cfg.k_channels)?;
    ensure_parent(out)?;
    write_json(out, &sel)?;
    write_snapshot(out, cfg)?;
    Ok(sel)
}

pub fn build_classifier(cfg: &RunConfig, embeddings: &Path, selection: Option<&Path>, out: &Path) -> Result<Classifier> {
    let m = load_class_embeddings(embeddings)?;
    // template stacks carry no class labels; fall back to the split order
    let names = match m.labels() {
        Some(l) => l.to_vec(),
        None => split_of(cfg)?.classes(),
    };
    let clf = match selection {
        Some(p) => build_refined_classifier(&m, &formats::read_selection(p)?, names)?,
        None => Classifier::naive(&m, names)?,
    };
    formats::write_classifier(out, &clf)?;
    write_snapshot(out, cfg)?;
    Ok(clf)
}

/// Groups labelled rows by label, in order of first appearance.
fn group_rows(m: &EmbeddingMatrix, path: &Path) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let labels = class_names_of(m, path)?;
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (label, row) in labels.into_iter().zip(m.iter_rows()) {
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, rows)) => rows.push(row.to_vec()),
            None => groups.push((label, vec![row.to_vec()])),
        }
    }
    Ok(groups)
}

/// Writes the partition JSON and, when asked, the identity adapter state.
pub fn partition(cfg: &RunConfig, features: &Path, out: &Path, adapter_out: Option<&Path>) -> Result<ChannelPartition> {
    let m = zemb::read_matrix(features)?;
    let groups: Vec<Vec<Vec<f64>>> = group_rows(&m, features)?.into_iter().map(|(_, rows)| rows).collect();
    let means = class_means(&groups, cfg.t)?;
    let part = partition_channels(&means, cfg.lambda, cfg.n_trainable)?;
    ensure_parent(out)?;
    write_json(out, &part)?;
    write_snapshot(out, cfg)?;
    if let Some(a) = adapter_out {
        ensure_parent(a)?;
        zemb::write_matrix(a, &ChannelAdapter::new(part.clone())?.state())?;
    }
    Ok(part)
}

/// Seen-class cache bank from labelled instance embeddings. Class order
/// follows the classifier.
pub fn build_cache(cfg: &RunConfig, instances: &Path, classifier: &Path, out: &Path) -> Result<()> {
    let clf = formats::read_classifier(classifier)?;
    let m = zemb::read_matrix(instances)?;
    let names = clf.class_names().to_vec();
    let mut seen = Vec::new();
    for (label, rows) in group_rows(&m, instances)? {
        let class = names
            .iter()
            .position(|n| *n == label)
            .ok_or_else(|| ZoriError::Usage(format!("{}: label '{label}' is not a classifier class", instances.display())))?;
        seen.push(ClassInstances { class, embeddings: rows });
    }
    seen.sort_by_key(|c| c.class);
    let bank = build_seen_bank(&seen, cfg.cache_k, names)?;
    formats::write_bank(out, &bank)?;
    write_snapshot(out, cfg)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ZoriError::Usage(format!("cannot start worker pool: {e}")))
}

/// Proposals grouped per image (first-appearance order) with their feature
/// maps from `<features>/<image_id>.zemb`.
pub fn load_images(features: &Path, proposals: Vec<Proposal>) -> Result<Vec<ImageInput>> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for p in proposals {
        if !grouped.contains_key(&p.image_id) {
            order.push(p.image_id.clone());
        }
        grouped.entry(p.image_id.clone()).or_default().push(p);
    }
    order
        .into_iter()
        .map(|id| {
            let feature_map: FeatureMap = zemb::read(&features.join(format!("{id}.zemb")))?.to_feature_map()?;
            Ok(ImageInput { feature_map, proposals: grouped.remove(&id).expect("grouped above") })
        })
        .collect()
}

pub struct PredictPaths<'a> {
    pub classifier: &'a Path,
    pub bank: &'a Path,
    pub features: &'a Path,
    pub proposals: &'a Path,
    pub out: &'a Path,
    pub bank_out: Option<&'a Path>,
}

/// Completes the bank with unseen pseudo-samples drawn from the test
/// images, then classifies every proposal. Output order is image order
/// then proposal order, independent of the worker count.
pub fn predict(cfg: &RunConfig, paths: &PredictPaths) -> Result<Vec<Detection>> {
    let split = split_of(cfg)?;
    let clf = formats::read_classifier(paths.classifier)?;
    let bank = formats::read_bank(paths.bank)?;
    let seen_mask: Vec<bool> = clf
        .class_names()
        .iter()
        .map(|n| {
            if split.is_seen(n) {
                Ok(true)
            } else if split.is_unseen(n) {
                Ok(false)
            } else {
                Err(ZoriError::from(zori_core::Error::SplitMismatch(format!("class '{n}' is not in the split"))))
            }
        })
        .collect::<Result<_>>()?;
    let params = PredictParams {
        alpha: cfg.alpha,
        temperature: cfg.temperature,
        ensemble: EnsembleConfig::new(cfg.beta_seen, cfg.beta_unseen, seen_mask)?,
    };
    let images = load_images(paths.features, formats::read_proposals(paths.proposals)?)?;
    let pool = thread_pool(cfg.workers)?;

    let dets = pool.install(|| -> Result<Vec<Detection>> {
        let bank = if bank.missing_classes().is_empty() {
            bank
        } else {
            let per_image: Vec<Vec<PseudoSamples>> = images
                .par_iter()
                .map(|img| collect_pseudo(&clf, &bank, std::slice::from_ref(img), &params))
                .collect::<zori_core::Result<_>>()?;
            let mut merged: Vec<PseudoSamples> =
                bank.missing_classes().into_iter().map(|class| PseudoSamples { class, candidates: Vec::new() }).collect();
            for image in per_image {
                for (m, ps) in merged.iter_mut().zip(image) {
                    m.candidates.extend(ps.candidates);
                }
            }
            zori_core::cachebank::augment_unseen(&bank, &merged)?
        };
        if let Some(dir) = paths.bank_out {
            formats::write_bank(dir, &bank)?;
        }
        let per_image: Vec<Vec<Detection>> = images
            .par_iter()
            .map(|img| predict_image(&clf, &bank, img, &params))
            .collect::<zori_core::Result<_>>()?;
        Ok(per_image.into_iter().flatten().collect())
    })?;

    ensure_parent(paths.out)?;
    formats::write_detections(paths.out, &dets)?;
    write_snapshot(paths.out, cfg)?;
    Ok(dets)
}

/// Writes `<out>` (JSON) and `<out with .txt extension>` (table).
pub fn evaluate_files(cfg: &RunConfig, detections: &Path, annotations: &Path, out: &Path) -> Result<zori_core::eval::EvalReport> {
    let split = split_of(cfg)?;
    let dets = formats::read_detections(detections)?;
    let gt = formats::read_annotations(annotations)?;
    let report = evaluate(&dets, &gt.annotations, &gt.categories, &split, cfg.protocol)?;
    ensure_parent(out)?;
    formats::write_report(out, &out.with_extension("txt"), &report)?;
    write_snapshot(out, cfg)?;
    Ok(report)
}

/// Writes the training file and both test files named after the split.
pub fn split_dataset(cfg: &RunConfig, annotations: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut split = split_of(cfg)?;
    if split.dataset_name.is_empty() {
        split.dataset_name = "dataset".into();
    }
    let set = formats::read_annotations(annotations)?;
    create_dir(out_dir)?;
    let train = filter_train_detailed(&set, &split)?;
    let mut written = Vec::new();
    let train_path = out_dir.join(split.train_file_name());
    formats::write_annotations(&train_path, &train.set)?;
    written.push(train_path);
    for protocol in [Protocol::Gzsri, Protocol::Zsri] {
        let path = out_dir.join(split.test_file_name(protocol));
        formats::write_annotations(&path, &filter_test(&set, &split, protocol)?)?;
        written.push(path);
    }
    write_json(&out_dir.join("discarded_images.json"), &train.discarded)?;
    write_snapshot(out_dir, cfg)?;
    Ok(written)
}

/// Layout written by [`synth`].
pub mod synth_layout {
    pub const TEXT: &str = "text_embeddings.zemb";
    pub const SPLIT: &str = "split.json";
    pub const INSTANCES: &str = "seen_instances.zemb";
    pub const BACKBONE: &str = "backbone_features.zemb";
    pub const ANNOTATIONS: &str = "annotations.json";
    pub const PROPOSALS: &str = "proposals.jsonl";
    pub const FEATURES: &str = "features";
    pub const PLANTED: &str = "planted.json";
}

fn labelled(rows: &[Vec<f64>], labels: Vec<String>) -> Result<EmbeddingMatrix> {
    Ok(EmbeddingMatrix::from_rows(rows)?.with_labels(labels)?)
}

/// Writes a complete synthetic dataset in the pipeline's input formats.
pub fn synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    use synth_layout::*;
    let sc = &cfg.synth;
    create_dir(out_dir)?;
    create_dir(&out_dir.join(FEATURES))?;
    let names = sc.class_names();

    let text = synth::generate_class_embeddings(sc)?;
    zemb::write_matrix(&out_dir.join(TEXT), &text.embeddings)?;
    write_json(&out_dir.join(SPLIT), &sc.split())?;

    let per_class = cfg.cache_k.max(cfg.t);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for inst in synth::seen_instances(sc, per_class)? {
        for e in inst.embeddings {
            rows.push(e);
            labels.push(names[inst.class].clone());
        }
    }
    zemb::write_matrix(&out_dir.join(INSTANCES), &labelled(&rows, labels)?)?;

    let (backbone, backbone_planted) = synth::generate_backbone_features(sc)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, feats) in backbone.into_iter().enumerate() {
        for f in feats {
            rows.push(f);
            labels.push(names[c].clone());
        }
    }
    zemb::write_matrix(&out_dir.join(BACKBONE), &labelled(&rows, labels)?)?;
    write_json(
        &out_dir.join(PLANTED),
        &serde_json::json!({ "text": text.planted, "backbone": backbone_planted }),
    )?;

    let scenes = synth::generate_dataset(sc)?;
    let mut set = AnnotationSet { categories: names, ..Default::default() };
    let mut proposals = Vec::new();
    for s in scenes {
        zemb::write(&out_dir.join(FEATURES).join(format!("{}.zemb", s.image_id)), &Tensor::from_feature_map(&s.feature_map))?;
        set.images.push(ImageInfo { id: s.image_id.clone(), width: s.feature_map.width(), height: s.feature_map.height() });
        set.annotations.extend(s.annotations);
        proposals.extend(s.proposals);
    }
    formats::write_annotations(&out_dir.join(ANNOTATIONS), &set)?;
    formats::write_proposals(&out_dir.join(PROPOSALS), &proposals)?;
    write_snapshot(out_dir, cfg)
}
