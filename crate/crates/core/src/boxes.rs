//! Prediction post-processing: score filtering and class-wise NMS.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Scalar};

/// One scored box from a detector, in COCO results form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox<f64>,
    pub score: f64,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, bbox: BBox<f64>, score: f64) -> Self {
        Self {
            image_id,
            category_id,
            bbox,
            score,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.bbox.is_valid() && (0.0..=1.0).contains(&self.score)
    }
}

/// Detections produced in one self-training round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub round: u32,
    pub detections: Vec<Detection>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredictionFile {
    Wrapped {
        #[serde(default)]
        round: u32,
        detections: Vec<Detection>,
    },
    Bare(Vec<Detection>),
}

impl PredictionSet {
    pub fn new(round: u32, detections: Vec<Detection>) -> Self {
        Self { round, detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Accepts either `{"round": t, "detections": [...]}` or a bare COCO
    /// results array (round 0). Every detection must have a valid box and a
    /// score in `[0, 1]`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: PredictionFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::MalformedPredictions(e.to_string()))?;
        let set = match file {
            PredictionFile::Wrapped { round, detections } => Self { round, detections },
            PredictionFile::Bare(detections) => Self {
                round: 0,
                detections,
            },
        };
        if let Some((i, d)) = set.detections.iter().enumerate().find(|(_, d)| !d.is_valid()) {
            return Err(Error::MalformedPredictions(format!(
                "detection {i} (image {}) has an invalid box or score {}",
                d.image_id, d.score
            )));
        }
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    /// Wrapped form, compact and deterministic.
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("prediction serialization is infallible")
    }
}

/// Keep detections with `score >= tau_s`, preserving order.
pub fn filter_by_score(p: &PredictionSet, tau_s: f64) -> PredictionSet {
    PredictionSet {
        round: p.round,
        detections: p
            .detections
            .iter()
            .filter(|d| d.score >= tau_s)
            .cloned()
            .collect(),
    }
}

/// Greedy NMS over one group. `order` lists candidate indices already sorted
/// by descending score; a later candidate is dropped when its IoU with a kept
/// one is strictly above `tau_n`. Returns kept indices in `order` order.
pub fn greedy_nms<T: Scalar>(boxes: &[BBox<T>], order: &[usize], tau_n: T) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::with_capacity(order.len());
    let mut suppressed = vec![false; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[pos] {
            continue;
        }
        keep.push(i);
        for (later, &j) in order.iter().enumerate().skip(pos + 1) {
            if !suppressed[later] && iou(&boxes[i], &boxes[j]) > tau_n {
                suppressed[later] = true;
            }
        }
    }
    keep
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub fn score_order<T: Scalar>(indices: &mut [usize], scores: &[T]) {
    indices.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
}

/// Greedy NMS applied independently within each `(image_id, category_id)`
/// group. Output is ordered by image, category, then descending score.
pub fn class_wise_nms(p: &PredictionSet, tau_n: f64) -> PredictionSet {
    let mut groups: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, d) in p.detections.iter().enumerate() {
        groups.entry((d.image_id, d.category_id)).or_default().push(i);
    }
    let boxes: Vec<BBox<f64>> = p.detections.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = p.detections.iter().map(|d| d.score).collect();

    let mut detections = Vec::new();
    for mut members in groups.into_values() {
        score_order(&mut members, &scores);
        for i in greedy_nms(&boxes, &members, tau_n) {
            detections.push(p.detections[i].clone());
        }
    }
    PredictionSet {
        round: p.round,
        detections,
    }
}
