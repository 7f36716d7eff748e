//! Independent reference implementations and random generators shared by
//! the integration suites. Nothing here calls into the geometry, NMS or
//! evaluation code it is used to check.

#![allow(dead_code)]

use pseudoloop::coco::{AnnotationRecord, CategoryRecord, Dataset, ImageRecord, Source};
use pseudoloop::{BBox, Detection, PredictionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Corner-form overlap, written out separately from the crate's version.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax2, ay2, bx2, by2) = (a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h);
    let ix = (ax2.min(bx2) - a.x.max(b.x)).max(0.0);
    let iy = (ay2.min(by2) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Quadratic NMS: a detection survives iff no surviving detection of the
/// same image and class that outranks it (higher score, or equal score and
/// lower index) overlaps it by more than `tau`. Ranks are processed in
/// global order so every outranking survivor is decided first.
pub fn ref_nms_keep(p: &PredictionSet, tau: f64) -> Vec<usize> {
    let n = p.detections.len();
    let outranks = |i: usize, j: usize| {
        let (a, b) = (&p.detections[i], &p.detections[j]);
        a.score > b.score || (a.score == b.score && i < j)
    };
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&i, &j| p.detections[j].score.partial_cmp(&p.detections[i].score).unwrap().then(i.cmp(&j)));
    let mut alive = vec![false; n];
    for &j in &rank {
        let dj = &p.detections[j];
        alive[j] = !(0..n).any(|i| {
            let di = &p.detections[i];
            alive[i]
                && i != j
                && outranks(i, j)
                && di.image_id == dj.image_id
                && di.category_id == dj.category_id
                && ref_iou(&di.bbox, &dj.bbox) > tau
        });
    }
    (0..n).filter(|&i| alive[i]).collect()
}

/// Random detections on a coarse grid so exact duplicates and score ties
/// occur regularly.
pub fn random_predictions(r: &mut ChaCha8Rng, max_boxes: usize, n_images: u64, n_classes: u64) -> PredictionSet {
    let n = r.gen_range(0..=max_boxes);
    let detections = (0..n)
        .map(|_| {
            let x = r.gen_range(0..20) as f64 * 5.0;
            let y = r.gen_range(0..20) as f64 * 5.0;
            let w = r.gen_range(1..12) as f64 * 5.0;
            let h = r.gen_range(1..12) as f64 * 5.0;
            let score = if r.gen_bool(0.3) {
                r.gen_range(0..=10) as f64 / 10.0
            } else {
                r.gen::<f64>()
            };
            Detection::new(
                r.gen_range(1..=n_images),
                r.gen_range(1..=n_classes),
                BBox::new(x, y, w, h),
                score,
            )
        })
        .collect();
    PredictionSet::new(0, detections)
}

/// A small scene: ground truth and detections over the same images and
/// classes. Some detections are perturbed copies of ground truth.
pub fn random_scene(r: &mut ChaCha8Rng, max_gt: usize, max_det: usize) -> (Dataset, PredictionSet) {
    let n_images = r.gen_range(1..=3u64);
    let n_classes = r.gen_range(1..=3u64);
    let images = (1..=n_images).map(|i| ImageRecord::new(i, format!("{i}.png"), 128, 128)).collect();
    let categories = (1..=n_classes).map(|c| CategoryRecord::new(c, format!("c{c}"))).collect();
    let n_gt = r.gen_range(0..=max_gt);
    let annotations: Vec<AnnotationRecord> = (0..n_gt)
        .map(|k| {
            let b = BBox::new(
                r.gen_range(0..16) as f64 * 4.0,
                r.gen_range(0..16) as f64 * 4.0,
                r.gen_range(2..12) as f64 * 4.0,
                r.gen_range(2..12) as f64 * 4.0,
            );
            AnnotationRecord::ground_truth(k as u64 + 1, r.gen_range(1..=n_images), r.gen_range(1..=n_classes), b)
        })
        .collect();
    let n_det = r.gen_range(0..=max_det);
    let detections = (0..n_det)
        .map(|_| {
            let score = if r.gen_bool(0.25) { 0.5 } else { r.gen::<f64>() };
            if !annotations.is_empty() && r.gen_bool(0.6) {
                let a = &annotations[r.gen_range(0..annotations.len())];
                let j = |r: &mut ChaCha8Rng| r.gen_range(-3..=3) as f64 * 2.0;
                let b = BBox::new(a.bbox.x + j(r), a.bbox.y + j(r), (a.bbox.w + j(r)).max(2.0), (a.bbox.h + j(r)).max(2.0));
                let cat = if r.gen_bool(0.85) { a.category_id } else { r.gen_range(1..=n_classes) };
                Detection::new(a.image_id, cat, b, score)
            } else {
                let b = BBox::new(
                    r.gen_range(0..16) as f64 * 4.0,
                    r.gen_range(0..16) as f64 * 4.0,
                    r.gen_range(2..12) as f64 * 4.0,
                    r.gen_range(2..12) as f64 * 4.0,
                );
                Detection::new(r.gen_range(1..=n_images), r.gen_range(1..=n_classes), b, score)
            }
        })
        .collect();
    (Dataset::new(images, categories, annotations), PredictionSet::new(0, detections))
}

/// Per-detection tp flags from a from-scratch greedy matcher: detections
/// are visited in global rank order and each claims the highest-IoU unused
/// ground truth of its image and class (first in annotation order on ties).
pub fn ref_match(gt: &Dataset, p: &PredictionSet, thresh: f64) -> Vec<bool> {
    let n = p.detections.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        p.detections[b].score.partial_cmp(&p.detections[a].score).unwrap().then(a.cmp(&b))
    });
    let mut used = vec![false; gt.annotations.len()];
    let mut tp = vec![false; n];
    for i in order {
        let d = &p.detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, a) in gt.annotations.iter().enumerate() {
            if used[g] || a.image_id != d.image_id || a.category_id != d.category_id {
                continue;
            }
            if a.source != Source::GroundTruth || a.iscrowd {
                continue;
            }
            let v = ref_iou(&d.bbox, &a.bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= thresh {
                used[g] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// VOC-style all-point AP: sentinel-padded recall/precision arrays, a
/// right-to-left precision envelope, and a sum of envelope times recall
/// increment at every point where recall changes.
pub fn ref_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let (mut tp, mut fp) = (0.0, 0.0);
    for &t in ranked_tp {
        if t { tp += 1.0 } else { fp += 1.0 }
        rec.push(tp / n_gt as f64);
        prec.push(tp / (tp + fp));
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).filter(|&i| rec[i] != rec[i - 1]).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

/// Per-class AP from the reference matcher, `None` for classes without
/// ground truth.
pub fn ref_class_aps(gt: &Dataset, p: &PredictionSet, thresh: f64) -> Vec<(u64, Option<f64>)> {
    let tp = ref_match(gt, p, thresh);
    let mut cats: Vec<u64> = gt.categories.iter().map(|c| c.id).collect();
    cats.sort_unstable();
    cats.into_iter()
        .map(|c| {
            let n_gt = gt
                .annotations
                .iter()
                .filter(|a| a.category_id == c && a.source == Source::GroundTruth && !a.iscrowd)
                .count();
            if n_gt == 0 {
                return (c, None);
            }
            let mut idx: Vec<usize> = (0..p.detections.len()).filter(|&i| p.detections[i].category_id == c).collect();
            idx.sort_by(|&a, &b| p.detections[b].score.partial_cmp(&p.detections[a].score).unwrap().then(a.cmp(&b)));
            let flags: Vec<bool> = idx.iter().map(|&i| tp[i]).collect();
            (c, Some(ref_ap(&flags, n_gt)))
        })
        .collect()
}

fn random_extra(r: &mut ChaCha8Rng) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    for k in 0..r.gen_range(0..3) {
        let v = match r.gen_range(0..4) {
            0 => json!(r.gen::<u32>()),
            1 => json!(format!("s{}", r.gen::<u16>())),
            2 => json!([r.gen::<bool>(), null]),
            _ => json!({"nested": r.gen::<f64>()}),
        };
        m.insert(format!("x_{k}"), v);
    }
    m
}

/// A random dataset satisfying every invariant, with full-precision
/// coordinates, mixed sources and pass-through keys.
pub fn random_dataset(r: &mut ChaCha8Rng) -> Dataset {
    let n_images = r.gen_range(1..=6u64);
    let n_cats = r.gen_range(1..=4u64);
    let image_ids: Vec<u64> = (0..n_images).map(|i| i * 3 + r.gen_range(0..3)).collect();
    let cat_ids: Vec<u64> = (0..n_cats).map(|c| 100 + c * 7).collect();
    let mut d = Dataset::default();
    for &id in &image_ids {
        let mut img = ImageRecord::new(id, format!("img_{id}.jpg"), r.gen_range(1..4000), r.gen_range(1..4000));
        img.extra = random_extra(r).into_iter().collect();
        d.images.push(img);
    }
    for &id in &cat_ids {
        let mut cat = CategoryRecord::new(id, format!("cat \"{id}\" ü"));
        cat.extra = random_extra(r).into_iter().collect();
        d.categories.push(cat);
    }
    for k in 0..r.gen_range(0..25u64) {
        let bbox = BBox::new(
            r.gen::<f64>() * 1000.0 - 100.0,
            r.gen::<f64>() * 1000.0,
            r.gen::<f64>() * 300.0 + 1e-3,
            r.gen::<f64>() * 300.0 + 1e-3,
        );
        let image_id = image_ids[r.gen_range(0..image_ids.len())];
        let category_id = cat_ids[r.gen_range(0..cat_ids.len())];
        let mut a = match r.gen_range(0..3) {
            0 => AnnotationRecord::ground_truth(k * 2 + 1, image_id, category_id, bbox),
            1 => AnnotationRecord::pseudo(k * 2 + 1, image_id, category_id, bbox, r.gen::<f64>()),
            _ => AnnotationRecord { source: Source::External, ..AnnotationRecord::ground_truth(k * 2 + 1, image_id, category_id, bbox) },
        };
        if r.gen_bool(0.2) {
            a.area = r.gen::<f64>() * 50.0 + 0.5;
        }
        a.iscrowd = r.gen_bool(0.1);
        a.extra = random_extra(r).into_iter().collect();
        d.annotations.push(a);
    }
    if r.gen_bool(0.5) {
        d.extra.insert("info".into(), json!({"description": "random", "year": 2024}));
        d.extra.insert("licenses".into(), json!([]));
    }
    d
}
