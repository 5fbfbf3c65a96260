//! Seen/unseen class splits and zero-shot annotation filtering.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::eval::{InstanceAnnotation, Protocol};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenUnseenSplit {
    #[serde(default)]
    pub dataset_name: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl SeenUnseenSplit {
    pub fn new(dataset_name: &str, seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        let split = Self { dataset_name: dataset_name.to_string(), seen, unseen };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.seen.iter().find(|c| self.unseen.contains(c)) {
            return Err(Error::OverlappingSplit(c.clone()));
        }
        Ok(())
    }

    pub fn is_seen(&self, class: &str) -> bool {
        self.seen.iter().any(|c| c == class)
    }

    pub fn is_unseen(&self, class: &str) -> bool {
        self.unseen.iter().any(|c| c == class)
    }

    /// All classes, seen first.
    pub fn classes(&self) -> Vec<String> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }

    /// `<dataset>_seen_<Ns>_<Nu>_train.json`
    pub fn train_file_name(&self) -> String {
        format!("{}_seen_{}_{}_train.json", self.dataset_name, self.seen.len(), self.unseen.len())
    }

    /// `<dataset>_gzsri_val.json` or `<dataset>_unseen_<Ns>_<Nu>_val.json`
    pub fn test_file_name(&self, protocol: Protocol) -> String {
        match protocol {
            Protocol::Gzsri => format!("{}_gzsri_val.json", self.dataset_name),
            Protocol::Zsri => format!("{}_unseen_{}_{}_val.json", self.dataset_name, self.seen.len(), self.unseen.len()),
        }
    }
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Splits of the three remote-sensing benchmarks.
pub fn builtin_split(name: &str) -> Result<SeenUnseenSplit> {
    let (seen, unseen): (&[&str], &[&str]) = match name {
        "isaid" => (
            &[
                "ship",
                "storage tank",
                "baseball diamond",
                "basketball court",
                "ground track field",
                "bridge",
                "large vehicle",
                "small vehicle",
                "roundabout",
                "plane",
                "harbor",
            ],
            &["tennis court", "helicopter", "swimming pool", "soccer ball field"],
        ),
        "nwpu" => (
            &[
                "airplane",
                "storage tank",
                "baseball diamond",
                "tennis court",
                "ground track field",
                "bridge",
                "vehicle",
            ],
            &["ship", "basketball court", "harbor"],
        ),
        "sior" => (
            &[
                "airplane",
                "baseball field",
                "bridge",
                "chimney",
                "dam",
                "expressway service area",
                "expressway toll station",
                "golf field",
                "harbor",
                "overpass",
                "ship",
                "stadium",
                "storage tank",
                "tennis court",
                "train station",
                "vehicle",
            ],
            &["airport", "basketball court", "ground track field", "windmill"],
        ),
        other => return Err(Error::UnknownDataset(other.to_string())),
    };
    SeenUnseenSplit::new(name, owned(seen), owned(unseen))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

/// Images, instance annotations and class names; `class_id` indexes
/// `categories`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<InstanceAnnotation>,
    pub categories: Vec<String>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        for a in &self.annotations {
            let Some(img) = self.images.iter().find(|i| i.id == a.image_id) else {
                return Err(Error::BadAnnotations(format!("annotation references unknown image '{}'", a.image_id)));
            };
            if a.class_id >= self.categories.len() {
                return Err(Error::BadAnnotations(format!("class id {} out of range", a.class_id)));
            }
            if a.mask.height() != img.height || a.mask.width() != img.width {
                return Err(Error::BadAnnotations(format!("mask size does not match image '{}'", img.id)));
            }
        }
        Ok(())
    }
}

/// Seen-class flag per category.
fn category_roles(set: &AnnotationSet, split: &SeenUnseenSplit) -> Result<Vec<bool>> {
    split.validate()?;
    let mut roles = Vec::with_capacity(set.categories.len());
    for name in &set.categories {
        if split.is_seen(name) {
            roles.push(true);
        } else if split.is_unseen(name) {
            roles.push(false);
        } else {
            return Err(Error::SplitMismatch(format!("category '{name}' is in neither seen nor unseen")));
        }
    }
    if let Some(missing) = split.seen.iter().find(|s| !set.categories.contains(s)) {
        return Err(Error::SplitMismatch(format!("seen class '{missing}' is not a category")));
    }
    Ok(roles)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainFilter {
    pub set: AnnotationSet,
    /// Ids of dropped images, in input order.
    pub discarded: Vec<String>,
}

/// Drops every image containing an unseen instance and reindexes the
/// categories to the seen classes (original order).
pub fn filter_train_detailed(set: &AnnotationSet, split: &SeenUnseenSplit) -> Result<TrainFilter> {
    set.validate()?;
    let roles = category_roles(set, split)?;
    let tainted: alloc::collections::BTreeSet<&str> = set
        .annotations
        .iter()
        .filter(|a| !roles[a.class_id])
        .map(|a| a.image_id.as_str())
        .collect();

    let mut remap = alloc::vec![usize::MAX; set.categories.len()];
    let mut categories = Vec::new();
    for (i, name) in set.categories.iter().enumerate() {
        if roles[i] {
            remap[i] = categories.len();
            categories.push(name.clone());
        }
    }

    let (images, discarded): (Vec<&ImageInfo>, Vec<&ImageInfo>) =
        set.images.iter().partition(|img| !tainted.contains(img.id.as_str()));
    let annotations = set
        .annotations
        .iter()
        .filter(|a| !tainted.contains(a.image_id.as_str()))
        .map(|a| InstanceAnnotation { class_id: remap[a.class_id], ..a.clone() })
        .collect();
    Ok(TrainFilter {
        set: AnnotationSet { images: images.into_iter().cloned().collect(), annotations, categories },
        discarded: discarded.into_iter().map(|i| i.id.clone()).collect(),
    })
}

pub fn filter_train(set: &AnnotationSet, split: &SeenUnseenSplit) -> Result<AnnotationSet> {
    Ok(filter_train_detailed(set, split)?.set)
}

/// GZSRI keeps everything; ZSRI removes seen-class annotations but keeps
/// every image and the category list.
pub fn filter_test(set: &AnnotationSet, split: &SeenUnseenSplit, protocol: Protocol) -> Result<AnnotationSet> {
    set.validate()?;
    let roles = category_roles(set, split)?;
    match protocol {
        Protocol::Gzsri => Ok(set.clone()),
        Protocol::Zsri => Ok(AnnotationSet {
            images: set.images.clone(),
            annotations: set.annotations.iter().filter(|a| !roles[a.class_id]).cloned().collect(),
            categories: set.categories.clone(),
        }),
    }
}
