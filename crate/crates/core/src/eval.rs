//! mAP@0.5 evaluation.
//!
//! Matching is greedy per score rank: within each `(image, category)` a
//! detection claims the still-unmatched ground-truth box it overlaps most,
//! provided the IoU reaches the threshold. AP integrates the monotone
//! precision envelope over every recall breakpoint (all-point
//! interpolation). Only `GroundTruth`-sourced, non-crowd annotations count
//! as ground truth; crowd regions are removed before matching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{score_order, PredictionSet};
use crate::coco::{Dataset, Source};
use crate::error::{Error, Result};
use crate::geometry::{iou, Scalar};

pub const DEFAULT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the evaluated `PredictionSet`.
    pub detection: usize,
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub gt_id: Option<u64>,
    /// Best IoU against the unmatched candidates at the time of matching.
    pub iou: f64,
    pub tp: bool,
}

fn scoring_gt(gt: &Dataset) -> HashMap<(u64, u64), Vec<usize>> {
    let mut map: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, a) in gt.annotations.iter().enumerate() {
        if a.source == Source::GroundTruth && !a.iscrowd {
            map.entry((a.image_id, a.category_id)).or_default().push(i);
        }
    }
    map
}

pub(crate) fn check_references(gt: &Dataset, p: &PredictionSet) -> Result<()> {
    let images: HashSet<u64> = gt.images.iter().map(|i| i.id).collect();
    let categories: HashSet<u64> = gt.categories.iter().map(|c| c.id).collect();
    for (i, d) in p.detections.iter().enumerate() {
        if !images.contains(&d.image_id) {
            return Err(Error::UnresolvableReference(format!(
                "detection {i} refers to unknown image {}",
                d.image_id
            )));
        }
        if !categories.contains(&d.category_id) {
            return Err(Error::UnresolvableReference(format!(
                "detection {i} refers to unknown category {}",
                d.category_id
            )));
        }
    }
    Ok(())
}

/// One record per detection, in detection order.
pub fn match_detections(gt: &Dataset, p: &PredictionSet, iou_thresh: f64) -> Result<Vec<MatchRecord>> {
    check_references(gt, p)?;
    let truth = scoring_gt(gt);

    let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, d) in p.detections.iter().enumerate() {
        groups.entry((d.image_id, d.category_id)).or_default().push(i);
    }
    let scores: Vec<f64> = p.detections.iter().map(|d| d.score).collect();

    let mut records: Vec<Option<MatchRecord>> = vec![None; p.detections.len()];
    for (key, mut members) in groups {
        score_order(&mut members, &scores);
        let candidates = truth.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let mut taken = vec![false; candidates.len()];
        for i in members {
            let det = &p.detections[i];
            let mut best: Option<(usize, f64)> = None;
            for (slot, &g) in candidates.iter().enumerate() {
                if taken[slot] {
                    continue;
                }
                let v = iou(&det.bbox, &gt.annotations[g].bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((slot, v));
                }
            }
            let best_iou = best.map_or(0.0, |(_, v)| v);
            let matched = match best {
                Some((slot, v)) if v >= iou_thresh => {
                    taken[slot] = true;
                    Some(gt.annotations[candidates[slot]].id)
                }
                _ => None,
            };
            records[i] = Some(MatchRecord {
                detection: i,
                image_id: det.image_id,
                category_id: det.category_id,
                score: det.score,
                gt_id: matched,
                iou: best_iou,
                tp: matched.is_some(),
            });
        }
    }
    Ok(records.into_iter().map(|r| r.expect("every detection is grouped")).collect())
}

/// Precision/recall after each ranked detection.
pub fn pr_points<T: Scalar>(ranked_tp: &[bool], n_gt: usize) -> Vec<(T, T)> {
    let n = T::from(n_gt).expect("count fits scalar");
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            let tp_t = T::from(tp).unwrap();
            (tp_t / n, tp_t / T::from(k + 1).unwrap())
        })
        .collect()
}

/// All-point interpolated AP for detections already ranked by confidence.
///
/// Recall steps by exactly `1 / n_gt` at each true positive, so the area
/// under the precision envelope is the sum of the envelope at those ranks
/// divided by `n_gt`.
pub fn ap_from_flags<T: Scalar>(ranked_tp: &[bool], n_gt: usize) -> T {
    if n_gt == 0 {
        return T::zero();
    }
    let points = pr_points::<T>(ranked_tp, n_gt);
    let mut envelope = T::zero();
    let mut sum = T::zero();
    for (k, &(_, precision)) in points.iter().enumerate().rev() {
        envelope = envelope.max(precision);
        if ranked_tp[k] {
            sum = sum + envelope;
        }
    }
    (sum / T::from(n_gt).unwrap()).min(T::one())
}

fn ranked(matches: &[MatchRecord]) -> Vec<bool> {
    let mut order: Vec<&MatchRecord> = matches.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.detection.cmp(&b.detection))
    });
    order.into_iter().map(|m| m.tp).collect()
}

pub fn average_precision(matches: &[MatchRecord], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(ap_from_flags(&ranked(matches), n_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub category_id: u64,
    pub name: String,
    /// `None` when the class has no ground truth; such classes are left out
    /// of the mean.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub category_id: u64,
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_50: f64,
    pub iou_threshold: f64,
    pub per_class: Vec<ClassEval>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pr_curves: Vec<PrCurve>,
}

pub fn evaluate(gt: &Dataset, p: &PredictionSet) -> Result<EvalReport> {
    evaluate_at(gt, p, DEFAULT_IOU)
}

pub fn evaluate_at(gt: &Dataset, p: &PredictionSet, iou_thresh: f64) -> Result<EvalReport> {
    let matches = match_detections(gt, p, iou_thresh)?;
    let mut n_gt: HashMap<u64, usize> = HashMap::new();
    for a in &gt.annotations {
        if a.source == Source::GroundTruth && !a.iscrowd {
            *n_gt.entry(a.category_id).or_default() += 1;
        }
    }
    let mut by_class: HashMap<u64, Vec<MatchRecord>> = HashMap::new();
    for m in matches {
        by_class.entry(m.category_id).or_default().push(m);
    }

    let mut categories: Vec<_> = gt.categories.iter().collect();
    categories.sort_by_key(|c| c.id);

    let mut per_class = Vec::with_capacity(categories.len());
    let mut pr_curves = Vec::new();
    for cat in categories {
        let matches = by_class.remove(&cat.id).unwrap_or_default();
        let n = n_gt.get(&cat.id).copied().unwrap_or(0);
        let n_tp = matches.iter().filter(|m| m.tp).count();
        let ap = average_precision(&matches, n).ok();
        if n > 0 {
            pr_curves.push(PrCurve {
                category_id: cat.id,
                points: pr_points(&ranked(&matches), n),
            });
        }
        per_class.push(ClassEval {
            category_id: cat.id,
            name: cat.name.clone(),
            ap,
            n_gt: n,
            n_tp,
            n_fp: matches.len() - n_tp,
        });
    }

    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map_50 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        map_50,
        iou_threshold: iou_thresh,
        per_class,
        pr_curves,
    })
}

impl EvalReport {
    pub fn without_curves(mut self) -> Self {
        self.pr_curves.clear();
        self
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serialization is infallible")
    }

    /// Aligned plain-text table, one row per category plus the mean.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_class
            .iter()
            .map(|c| c.name.chars().count())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8}  {:<name_w$}  {:>6}  {:>6}  {:>6}  {:>7}",
            "category", "name", "n_gt", "n_tp", "n_fp", "AP@50"
        );
        for c in &self.per_class {
            let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
            let _ = writeln!(
                out,
                "{:>8}  {:<name_w$}  {:>6}  {:>6}  {:>6}  {:>7}",
                c.category_id, c.name, c.n_gt, c.n_tp, c.n_fp, ap
            );
        }
        let _ = writeln!(out, "mAP@{:.2}: {:.4}", self.iou_threshold, self.map_50);
        out
    }
}
