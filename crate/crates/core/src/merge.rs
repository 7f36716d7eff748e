//! Pseudo-label conversion and dataset fusion.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::boxes::PredictionSet;
use crate::coco::{AnnotationRecord, Dataset, Source};
use crate::error::{Error, Result};
use crate::eval::check_references;
use crate::geometry::iou;

/// Which dataset round `t` merges its pseudo-labels into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossRound {
    /// Always the original few-shot annotations.
    #[default]
    FromScratch,
    /// The previous round's merged set.
    Accumulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePolicy {
    /// Pseudo boxes whose IoU with a same-class ground-truth box in the same
    /// image exceeds this are dropped. `1.0` keeps everything.
    pub gt_suppression_iou: f64,
    pub cross_round: CrossRound,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            gt_suppression_iou: 0.5,
            cross_round: CrossRound::FromScratch,
        }
    }
}

impl MergePolicy {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gt_suppression_iou) {
            return Err(Error::InvalidConfig(format!(
                "gt_suppression_iou {} outside [0, 1]",
                self.gt_suppression_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeSummary {
    pub kept_pseudo: usize,
    pub dropped_pseudo: usize,
    pub gt_count: usize,
}

/// Pseudo annotations for every detection, with ids allocated upward from
/// one past the largest annotation id in `base`.
pub fn to_pseudo_annotations(p: &PredictionSet, base: &Dataset) -> Result<Vec<AnnotationRecord>> {
    check_references(base, p)?;
    let first = base.max_annotation_id().map_or(1, |m| m + 1);
    Ok(p.detections
        .iter()
        .zip(first..)
        .map(|(d, id)| AnnotationRecord::pseudo(id, d.image_id, d.category_id, d.bbox, d.score))
        .collect())
}

/// `gt` plus every pseudo annotation not duplicating a same-class,
/// same-image ground-truth box. Ground truth passes through untouched.
pub fn merge_pseudo(gt: &Dataset, pseudo: &[AnnotationRecord], policy: &MergePolicy) -> Result<Dataset> {
    merge_pseudo_summarized(gt, pseudo, policy).map(|(d, _)| d)
}

pub fn merge_pseudo_summarized(
    gt: &Dataset,
    pseudo: &[AnnotationRecord],
    policy: &MergePolicy,
) -> Result<(Dataset, MergeSummary)> {
    policy.check()?;
    let mut ids: HashSet<u64> = gt.annotations.iter().map(|a| a.id).collect();
    for a in pseudo {
        if !ids.insert(a.id) {
            return Err(Error::DuplicateId(format!("annotation {}", a.id)));
        }
    }

    let mut truth: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, a) in gt.annotations.iter().enumerate() {
        if a.source == Source::GroundTruth {
            truth.entry((a.image_id, a.category_id)).or_default().push(i);
        }
    }

    let mut out = gt.clone();
    let mut dropped = 0;
    for a in pseudo {
        let duplicate = truth.get(&(a.image_id, a.category_id)).is_some_and(|idx| {
            idx.iter()
                .any(|&g| iou(&a.bbox, &gt.annotations[g].bbox) > policy.gt_suppression_iou)
        });
        if duplicate {
            dropped += 1;
        } else {
            out.annotations.push(a.clone());
        }
    }
    out.check()?;
    let summary = MergeSummary {
        kept_pseudo: pseudo.len() - dropped,
        dropped_pseudo: dropped,
        gt_count: truth.values().map(Vec::len).sum(),
    };
    Ok((out, summary))
}

fn max_id(ids: impl Iterator<Item = u64>) -> u64 {
    ids.max().unwrap_or(0)
}

/// Fold `b` into `a`'s id space.
///
/// Categories are unified by name; a name that `b` does not share gets
/// `old id + max(a category ids) + 1`, as do all of `b`'s images and
/// annotations with respect to their own tables. Ground-truth annotations
/// from `b` are re-tagged `External`, since untagged is indistinguishable
/// from ground truth after parsing.
pub fn merge_datasets(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut by_name: BTreeMap<&str, &crate::coco::CategoryRecord> = BTreeMap::new();
    for c in &a.categories {
        if by_name.insert(c.name.as_str(), c).is_some() {
            return Err(Error::CategoryConflict(format!(
                "name {:?} used by several categories of the first dataset",
                c.name
            )));
        }
    }

    let cat_offset = max_id(a.categories.iter().map(|c| c.id)) + 1;
    let img_offset = max_id(a.images.iter().map(|i| i.id)) + 1;
    let ann_offset = max_id(a.annotations.iter().map(|x| x.id)) + 1;

    let mut out = a.clone();
    let mut cat_map: HashMap<u64, u64> = HashMap::new();
    let mut seen_b_names: HashSet<&str> = HashSet::new();
    for c in &b.categories {
        if !seen_b_names.insert(c.name.as_str()) {
            return Err(Error::CategoryConflict(format!(
                "name {:?} used by several categories of the second dataset",
                c.name
            )));
        }
        match by_name.get(c.name.as_str()) {
            Some(existing) => {
                if let (Some(sa), Some(sb)) = (existing.extra.get("supercategory"), c.extra.get("supercategory")) {
                    if sa != sb {
                        return Err(Error::CategoryConflict(format!(
                            "category {:?} has supercategory {sa} vs {sb}",
                            c.name
                        )));
                    }
                }
                cat_map.insert(c.id, existing.id);
            }
            None => {
                let mut nc = c.clone();
                nc.id = c.id + cat_offset;
                cat_map.insert(c.id, nc.id);
                out.categories.push(nc);
            }
        }
    }

    for img in &b.images {
        let mut ni = img.clone();
        ni.id = img.id + img_offset;
        out.images.push(ni);
    }
    for ann in &b.annotations {
        let mut na = ann.clone();
        na.id = ann.id + ann_offset;
        na.image_id = ann.image_id + img_offset;
        na.category_id = *cat_map.get(&ann.category_id).ok_or_else(|| {
            Error::ReferenceError(format!(
                "annotation {} refers to unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        if na.source == Source::GroundTruth {
            na.source = Source::External;
        }
        out.annotations.push(na);
    }
    out.check()?;
    Ok(out)
}
