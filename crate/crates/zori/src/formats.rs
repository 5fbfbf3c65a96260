//! JSON and directory formats around the core types.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zori_core::cachebank::{CacheBank, Provenance};
use zori_core::dec::{ChannelSelection, Classifier};
use zori_core::eval::{Detection, EvalReport, InstanceAnnotation};
use zori_core::pipeline::Proposal;
use zori_core::protocol::{AnnotationSet, ImageInfo, SeenUnseenSplit};
use zori_core::tensor::{BinaryMask, EmbeddingMatrix};

use crate::error::{Result, ZoriError};
use crate::zemb;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ZoriError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ZoriError::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ZoriError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ZoriError::io(path, e))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| ZoriError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ZoriError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ZoriError::json(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ZoriError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| ZoriError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| ZoriError::io(path, e))?;
    }
    w.flush().map_err(|e| ZoriError::io(path, e))
}

/// Run-length encoded mask: row-major counts, first run is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub h: usize,
    pub w: usize,
    pub rle: Vec<u32>,
}

impl RleMask {
    pub fn from_mask(m: &BinaryMask) -> Self {
        Self { h: m.height(), w: m.width(), rle: m.to_rle() }
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        Ok(BinaryMask::from_rle(self.h, self.w, &self.rle)?)
    }
}

/// Image and category ids may be numbers or strings on input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Id {
    Num(u64),
    Text(String),
}

impl Id {
    fn key(&self) -> String {
        match self {
            Id::Num(n) => n.to_string(),
            Id::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub mask: RleMask,
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_lines::<DetectionRecord>(path)?
        .into_iter()
        .map(|r| Ok(Detection { image_id: r.image_id, class_id: r.class_id, score: r.score, mask: r.mask.to_mask()? }))
        .collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_lines(
        path,
        dets.iter().map(|d| DetectionRecord {
            image_id: d.image_id.clone(),
            class_id: d.class_id,
            score: d.score,
            mask: RleMask::from_mask(&d.mask),
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image_id: String,
    pub score: f64,
    pub mask: RleMask,
    /// In-vocabulary class embedding of the proposal, full dimension.
    pub embedding: Vec<f64>,
}

pub fn read_proposals(path: &Path) -> Result<Vec<Proposal>> {
    read_lines::<ProposalRecord>(path)?
        .into_iter()
        .map(|r| {
            Ok(Proposal { image_id: r.image_id, mask: r.mask.to_mask()?, score: r.score, embedding: r.embedding, gt_index: None })
        })
        .collect()
}

pub fn write_proposals(path: &Path, proposals: &[Proposal]) -> Result<()> {
    write_lines(
        path,
        proposals.iter().map(|p| ProposalRecord {
            image_id: p.image_id.clone(),
            score: p.score,
            mask: RleMask::from_mask(&p.mask),
            embedding: p.embedding.clone(),
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    id: Id,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: Id,
    #[serde(alias = "class_id")]
    category_id: Id,
    #[serde(alias = "mask")]
    segmentation: RleMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryRecord {
    id: Id,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

/// Reads a COCO-style annotation subset. Category ids are arbitrary on
/// input and become positions in the category list.
pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    let file: AnnotationFile = read_json(path)?;
    let bad = |msg: String| ZoriError::json(path, msg);
    let mut cat_index = HashMap::new();
    for (i, c) in file.categories.iter().enumerate() {
        if cat_index.insert(c.id.key(), i).is_some() {
            return Err(bad(format!("duplicate category id {}", c.id.key())));
        }
    }
    let annotations = file
        .annotations
        .iter()
        .map(|a| {
            let class_id = *cat_index
                .get(&a.category_id.key())
                .ok_or_else(|| bad(format!("unknown category id {}", a.category_id.key())))?;
            Ok(InstanceAnnotation { image_id: a.image_id.key(), class_id, mask: a.segmentation.to_mask()? })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = AnnotationSet {
        images: file
            .images
            .iter()
            .map(|i| ImageInfo { id: i.id.key(), width: i.width, height: i.height })
            .collect(),
        annotations,
        categories: file.categories.into_iter().map(|c| c.name).collect(),
    };
    set.validate()?;
    Ok(set)
}

pub fn write_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let file = AnnotationFile {
        images: set
            .images
            .iter()
            .map(|i| ImageRecord { id: Id::Text(i.id.clone()), width: i.width, height: i.height })
            .collect(),
        annotations: set
            .annotations
            .iter()
            .map(|a| AnnotationRecord {
                image_id: Id::Text(a.image_id.clone()),
                category_id: Id::Num(a.class_id as u64),
                segmentation: RleMask::from_mask(&a.mask),
            })
            .collect(),
        categories: set
            .categories
            .iter()
            .enumerate()
            .map(|(i, n)| CategoryRecord { id: Id::Num(i as u64), name: n.clone() })
            .collect(),
    };
    write_json(path, &file)
}

pub fn read_split(path: &Path) -> Result<SeenUnseenSplit> {
    let split: SeenUnseenSplit = read_json(path)?;
    split.validate()?;
    Ok(split)
}

/// A built-in dataset name or a split JSON file.
pub fn resolve_split(name_or_path: &str) -> Result<SeenUnseenSplit> {
    match zori_core::protocol::builtin_split(name_or_path) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(name_or_path).exists() => read_split(Path::new(name_or_path)),
        Err(e) => Err(e.into()),
    }
}

pub fn read_selection(path: &Path) -> Result<ChannelSelection> {
    let sel: ChannelSelection = read_json(path)?;
    sel.validate()?;
    Ok(sel)
}

/// Classifier directory: `weights.zemb` (rows labelled by class) and an
/// optional `selection.json`.
pub fn write_classifier(dir: &Path, clf: &Classifier) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ZoriError::io(dir, e))?;
    let weights = clf.weights().clone().with_labels(clf.class_names().to_vec())?;
    zemb::write_matrix(&dir.join("weights.zemb"), &weights)?;
    let sel_path = dir.join("selection.json");
    match clf.selection() {
        Some(sel) => write_json(&sel_path, sel),
        None if sel_path.exists() => fs::remove_file(&sel_path).map_err(|e| ZoriError::io(&sel_path, e)),
        None => Ok(()),
    }
}

pub fn read_classifier(dir: &Path) -> Result<Classifier> {
    let path = dir.join("weights.zemb");
    let weights = zemb::read_matrix(&path)?;
    let names = weights
        .labels()
        .ok_or_else(|| ZoriError::json(&path, "classifier weights need class labels"))?
        .to_vec();
    let sel_path = dir.join("selection.json");
    let selection = if sel_path.exists() { Some(read_selection(&sel_path)?) } else { None };
    Ok(Classifier::from_parts(&weights, names, selection)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMeta {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub class_names: Vec<String>,
    pub provenance: Vec<Provenance>,
}

/// Bank directory: `keys.zemb`, `values.zemb` (one-hot) and `meta.json`.
pub fn write_bank(dir: &Path, bank: &CacheBank) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ZoriError::io(dir, e))?;
    let row_names: Vec<String> = bank.labels().iter().map(|&l| bank.class_names()[l].clone()).collect();
    zemb::write_matrix(&dir.join("keys.zemb"), &bank.keys().clone().with_labels(row_names)?)?;
    zemb::write_matrix(&dir.join("values.zemb"), &bank.values())?;
    write_json(
        &dir.join("meta.json"),
        &BankMeta { k: bank.k(), p: bank.p(), class_names: bank.class_names().to_vec(), provenance: bank.provenance().to_vec() },
    )
}

pub fn read_bank(dir: &Path) -> Result<CacheBank> {
    let meta: BankMeta = read_json(&dir.join("meta.json"))?;
    let keys = zemb::read_matrix(&dir.join("keys.zemb"))?;
    let values_path = dir.join("values.zemb");
    let values = zemb::read_matrix(&values_path)?;
    if values.rows() != keys.rows() || values.cols() != meta.class_names.len() {
        return Err(ZoriError::json(&values_path, "value matrix shape does not match keys and class names"));
    }
    let mut labels = Vec::with_capacity(values.rows());
    for (r, row) in values.iter_rows().enumerate() {
        let ones: Vec<usize> = (0..row.len()).filter(|&c| row[c] == 1.0).collect();
        if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(ZoriError::json(&values_path, format!("row {r} is not one-hot")));
        }
        labels.push(ones[0]);
    }
    let keys = EmbeddingMatrix::new(keys.rows(), keys.cols(), keys.into_data())?;
    Ok(CacheBank::from_parts(&keys, labels, meta.provenance, meta.class_names, meta.k, meta.p)?)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Aligned plain-text rendering; every value is in percent.
pub fn report_table(r: &EvalReport) -> String {
    let name_w = r.classes.iter().map(|c| c.name.len()).max().unwrap_or(0).max(8);
    let mut s = String::new();
    let _ = writeln!(s, "protocol {}  AP@{}", r.protocol.as_str(), r.ap_iou);
    let _ = write!(s, "{:<name_w$}  {:<6}  {:>5}  {:>7}", "class", "split", "#gt", "AP");
    for t in &r.iou_thresholds {
        let _ = write!(s, "  {:>7}", format!("R@{t}"));
    }
    s.push('\n');
    for c in &r.classes {
        let split = if c.seen { "seen" } else { "unseen" };
        let _ = write!(s, "{:<name_w$}  {:<6}  {:>5}  {:>7}", c.name, split, c.num_gt, cell(c.ap.map(|v| 100.0 * v)));
        for v in &c.recall {
            let _ = write!(s, "  {:>7}", cell(v.map(|v| 100.0 * v)));
        }
        s.push('\n');
    }
    s.push('\n');
    let _ = writeln!(s, "{:<10}  {:>7}  {:>7}  {:>7}", "metric", "seen", "unseen", "HM");
    let mut row = |label: String, g: &zori_core::eval::GroupMetric| {
        let _ = writeln!(s, "{label:<10}  {:>7}  {:>7}  {:>7}", cell(g.seen), cell(g.unseen), cell(g.hm));
    };
    row(format!("mAP@{}", r.ap_iou), &r.map);
    for (t, g) in r.iou_thresholds.iter().zip(&r.recall) {
        row(format!("R@100@{t}"), g);
    }
    s
}

pub fn write_report(json_path: &Path, text_path: &Path, r: &EvalReport) -> Result<()> {
    write_json(json_path, r)?;
    fs::write(text_path, report_table(r)).map_err(|e| ZoriError::io(text_path, e))
}
